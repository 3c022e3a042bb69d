fn main() {
    std::process::exit(causeloc::cli::main());
}
