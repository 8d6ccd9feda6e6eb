//! Brute-force reference metrics shared by the integration tests.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const D8: [usize; 3] = [8, 8, 8];

pub fn at(m: &[bool], p: [isize; 3]) -> bool {
    if p.iter().any(|&c| !(0..8).contains(&c)) {
        return false;
    }
    m[((p[0] * 8 + p[1]) * 8 + p[2]) as usize]
}

pub fn brute_surface(m: &[bool]) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for i in 0..8 {
        for j in 0..8 {
            for k in 0..8 {
                let p = [i, j, k];
                if !at(m, p) {
                    continue;
                }
                let steps = [
                    [1, 0, 0],
                    [-1, 0, 0],
                    [0, 1, 0],
                    [0, -1, 0],
                    [0, 0, 1],
                    [0, 0, -1],
                ];
                if steps.iter().any(|s| !at(m, [i + s[0], j + s[1], k + s[2]])) {
                    out.push(p);
                }
            }
        }
    }
    out
}

pub fn brute_directed(from: &[[isize; 3]], to: &[[isize; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    (((a[0] - b[0]).pow(2) + (a[1] - b[1]).pow(2) + (a[2] - b[2]).pow(2)) as f64)
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Numpy's default percentile (linear between closest ranks).
pub fn numpy_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let t = pos - lo as f64;
    let diff = v[hi] - v[lo];
    if t >= 0.5 {
        v[hi] - diff * (1.0 - t)
    } else {
        v[lo] + diff * t
    }
}

pub fn brute_hd95(a: &[bool], b: &[bool]) -> Option<f64> {
    match (a.contains(&true), b.contains(&true)) {
        (false, false) => Some(0.0),
        (true, true) => {
            let (sa, sb) = (brute_surface(a), brute_surface(b));
            let mut all = brute_directed(&sa, &sb);
            all.extend(brute_directed(&sb, &sa));
            Some(numpy_percentile(all, 95.0))
        }
        _ => None,
    }
}

pub fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i]).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i]).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Blobby random masks: a few random boxes, sometimes empty.
pub fn random_labels(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut label = vec![0u8; 512];
    for _ in 0..rng.gen_range(0..4) {
        let lo: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..8));
        let hi: [usize; 3] = std::array::from_fn(|a| rng.gen_range(lo[a]..8) + 1);
        let class = rng.gen_range(1..3u8);
        for i in lo[0]..hi[0] {
            for j in lo[1]..hi[1] {
                for k in lo[2]..hi[2] {
                    label[(i * 8 + j) * 8 + k] = class;
                }
            }
        }
    }
    for v in label.iter_mut() {
        if rng.gen_bool(0.05) {
            *v = rng.gen_range(0..3);
        }
    }
    label
}
