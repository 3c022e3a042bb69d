//! Brute-force oracles and random fixtures shared by the integration tests.
//! Every oracle works from the definitions directly and never calls the
//! library's scoring or ranking code.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use causeloc::{Provenance, ResponseMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random scoring instance: activations indexed `[image][voxel]` plus role sets.
pub struct Instance {
    pub image_ids: Vec<String>,
    pub voxel_ids: Vec<String>,
    pub act: Vec<Vec<f64>>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    /// Parent index to edit indices.
    pub pairs: BTreeMap<usize, Vec<usize>>,
}

impl Instance {
    pub fn random(r: &mut ChaCha8Rng) -> Instance {
        let n_img = r.random_range(4..=30);
        let n_vox = r.random_range(1..=20);
        let coarse = r.random_bool(0.4);
        let mut image_ids: Vec<String> = (0..n_img).map(|i| format!("img{:03}", i * 7 % 101)).collect();
        image_ids.shuffle(r);
        let voxel_ids = (0..n_vox).map(|v| format!("v{v:02}")).collect();
        let act = (0..n_img)
            .map(|_| {
                (0..n_vox)
                    .map(|_| {
                        let x: f32 = if coarse {
                            r.random_range(-2i32..=2) as f32 * 0.5
                        } else {
                            r.random_range(-3.0f32..3.0)
                        };
                        f64::from(x)
                    })
                    .collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..n_img).collect();
        order.shuffle(r);
        let n_pos = r.random_range(1..=(n_img / 2).max(1));
        let pos: Vec<usize> = order[..n_pos].to_vec();
        let mut neg = Vec::new();
        let mut pairs: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &order[n_pos..] {
            match r.random_range(0..3) {
                0 => neg.push(i),
                1 => {
                    let parent = pos[r.random_range(0..pos.len())];
                    pairs.entry(parent).or_default().push(i);
                }
                _ => {}
            }
        }
        Instance {
            image_ids,
            voxel_ids,
            act,
            pos,
            neg,
            pairs,
        }
    }

    pub fn matrix(&self) -> ResponseMatrix {
        let values = self.act.iter().flatten().map(|&x| x as f32).collect();
        ResponseMatrix::new(self.image_ids.clone(), self.voxel_ids.clone(), values, Provenance::Predicted).unwrap()
    }

    pub fn ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.image_ids[i].clone()).collect()
    }

    pub fn id_pairs(&self) -> BTreeMap<String, Vec<String>> {
        self.pairs
            .iter()
            .map(|(p, e)| (self.image_ids[*p].clone(), self.ids(e)))
            .collect()
    }

    pub fn column(&self, v: usize) -> Vec<f64> {
        self.act.iter().map(|row| row[v]).collect()
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Negatives whose count of strictly harder negatives is below `k`. A
/// negative is harder when its activation is greater, or equal with a smaller id.
pub fn oracle_hardest(a: &[f64], ids: &[String], neg: &[usize], k: usize) -> Vec<usize> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &j in neg {
        let harder = neg
            .iter()
            .filter(|&&i| a[i] > a[j] || (a[i] == a[j] && ids[i] < ids[j]))
            .count();
        if harder < k {
            out.push((harder, j));
        }
    }
    out.sort();
    out.into_iter().map(|(_, j)| j).collect()
}

pub fn oracle_pos(a: &[f64], pos: &[usize]) -> f64 {
    mean(pos.iter().map(|&i| a[i]))
}

pub fn oracle_neg(a: &[f64], ids: &[String], pos: &[usize], neg: &[usize], k: usize) -> Option<f64> {
    if neg.is_empty() {
        return None;
    }
    let hard = oracle_hardest(a, ids, neg, k);
    Some(oracle_pos(a, pos) - mean(hard.iter().map(|&i| a[i])))
}

pub fn oracle_edit(a: &[f64], pairs: &BTreeMap<usize, Vec<usize>>) -> Option<f64> {
    let diffs: Vec<f64> = pairs
        .iter()
        .filter(|(_, e)| !e.is_empty())
        .map(|(p, e)| {
            let mut worst = a[e[0]];
            for &i in e {
                if a[i] > worst {
                    worst = a[i];
                }
            }
            a[*p] - worst
        })
        .collect();
    (!diffs.is_empty()).then(|| mean(diffs))
}

pub fn oracle_causal(neg: Option<f64>, edit: Option<f64>) -> Option<f64> {
    match (neg, edit) {
        (Some(n), Some(e)) => Some((n + e) / 2.0),
        (Some(x), None) | (None, Some(x)) => Some(x),
        (None, None) => None,
    }
}

/// Weighted sum, each component first z-scored across voxels with the
/// population standard deviation when `standardize` is set.
pub fn oracle_combined(components: &BTreeMap<String, Vec<f64>>, weights: &BTreeMap<String, f64>, standardize: bool) -> Vec<f64> {
    let n = components.values().next().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for (name, w) in weights {
        let c = &components[name];
        let m = c.iter().sum::<f64>() / n as f64;
        let var = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        for v in 0..n {
            let x = if !standardize {
                c[v]
            } else if var == 0.0 {
                0.0
            } else {
                (c[v] - m) / var.sqrt()
            };
            out[v] += w * x;
        }
    }
    out
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Relative paths and contents of every file below `root`, sorted.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

pub fn small_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/small.toml")
}

pub fn reference_world_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("worlds/reference.toml")
}
