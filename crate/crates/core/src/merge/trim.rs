//! Importance-weighted top-k trimming of the task vector.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive};
use crate::error::{Error, Result};
use crate::fim::FimScores;
use crate::topology::ModelTopology;

/// Where the keep-quantile is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimMode {
    /// Separately for every coefficient-set tensor.
    #[default]
    PerTensor,
    /// Over all coefficient-set tensors of a layer at once.
    PooledLayer,
}

/// Number of entries kept out of `n` at keep ratio `r`: `ceil(r * n)`, with
/// products that are integral up to rounding noise not pushed up by one.
pub fn survivor_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).min(n)
}

/// Mask of the `k` largest entries of `w`; among equal weights the lower
/// index wins.
pub fn top_k_mask(w: &[f64], k: usize) -> Vec<bool> {
    let n = w.len();
    if k >= n {
        return vec![true; n];
    }
    let mut mask = vec![false; n];
    if k == 0 {
        return mask;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let order = |a: &usize, b: &usize| w[*b].total_cmp(&w[*a]).then(a.cmp(b));
    idx.select_nth_unstable_by(k - 1, order);
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimStat {
    /// Tensor name, or `layer.<i>` for pooled groups.
    pub group: String,
    pub retained: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrimOutcome {
    /// Keep-masks for every trimmed tensor; tensors absent here are untouched.
    pub masks: BTreeMap<String, Vec<bool>>,
    pub stats: Vec<TrimStat>,
    /// Tensors whose importance fell back to `per_layer * |delta|`.
    pub fallback_tensors: Vec<String>,
}

fn importance(
    name: &str,
    delta: &[f64],
    fim: Option<&FimScores>,
    layer: usize,
    allow_fallback: bool,
) -> Result<(Vec<f64>, bool)> {
    if let Some(t) = fim.and_then(|f| f.elementwise_for(name)) {
        if t.numel() != delta.len() {
            return Err(Error::Misaligned(format!(
                "FIM for `{name}` has {} entries, task vector has {}",
                t.numel(),
                delta.len()
            )));
        }
        let w = t.data().iter().zip(delta).map(|(&f, d)| f as f64 * d.abs()).collect();
        return Ok((w, false));
    }
    if !allow_fallback {
        return Err(Error::InvalidPlan(format!(
            "no elementwise FIM for `{name}` and scalar fallback is disabled"
        )));
    }
    let scale = fim.and_then(|f| f.per_layer.get(&layer).copied()).unwrap_or(1.0);
    Ok((delta.iter().map(|d| scale * d.abs()).collect(), true))
}

/// Compute keep-masks for every coefficient-set tensor.
pub fn compute_masks(
    deltas: &BTreeMap<String, Vec<f64>>,
    fim: Option<&FimScores>,
    topology: &ModelTopology,
    r: f64,
    mode: TrimMode,
    allow_fallback: bool,
) -> Result<TrimOutcome> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidPlan(format!("trim ratio {r} outside (0, 1]")));
    }
    let mut out = TrimOutcome::default();
    for layer in topology.coefficient_layers() {
        let names: Vec<&str> = topology.coefficient_params(layer).collect();
        let mut weights = Vec::with_capacity(names.len());
        for &name in &names {
            let d = deltas
                .get(name)
                .ok_or_else(|| Error::Misaligned(format!("task vector lacks `{name}`")))?;
            let (w, fell_back) = importance(name, d, fim, layer, allow_fallback)?;
            if fell_back {
                out.fallback_tensors.push(name.to_string());
            }
            weights.push(w);
        }
        match mode {
            TrimMode::PerTensor => {
                for (name, w) in names.iter().zip(&weights) {
                    let k = survivor_count(r, w.len());
                    out.stats.push(TrimStat {
                        group: name.to_string(),
                        retained: k,
                        total: w.len(),
                    });
                    out.masks.insert(name.to_string(), top_k_mask(w, k));
                }
            }
            TrimMode::PooledLayer => {
                let pooled: Vec<f64> = weights.iter().flatten().copied().collect();
                let k = survivor_count(r, pooled.len());
                let mask = top_k_mask(&pooled, k);
                out.stats.push(TrimStat {
                    group: format!("layer.{layer}"),
                    retained: k,
                    total: pooled.len(),
                });
                let mut at = 0;
                for (name, w) in names.iter().zip(&weights) {
                    out.masks.insert(name.to_string(), mask[at..at + w.len()].to_vec());
                    at += w.len();
                }
            }
        }
    }
    Ok(out)
}

/// Zero every coefficient-set entry of `delta` outside the top
/// `ceil(r * n)` by importance `F * |delta|`. Other tensors pass through.
pub fn trim_task_vector(
    delta: &TensorArchive,
    fim: Option<&FimScores>,
    topology: &ModelTopology,
    r: f64,
    mode: TrimMode,
    allow_fallback: bool,
) -> Result<(TensorArchive, TrimOutcome)> {
    let deltas: BTreeMap<String, Vec<f64>> = delta.iter().map(|(n, t)| (n.to_string(), t.to_f64())).collect();
    let outcome = compute_masks(&deltas, fim, topology, r, mode, allow_fallback)?;
    let mut trimmed = TensorArchive::new();
    for (name, t) in delta.iter() {
        let data = match outcome.masks.get(name) {
            Some(mask) => t
                .data()
                .iter()
                .zip(mask)
                .map(|(&x, &keep)| if keep { x } else { 0.0 })
                .collect(),
            None => t.data().to_vec(),
        };
        trimmed.set(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok((trimmed, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fim::{FimMeta, Reduction};
    use crate::topology::{parse_topology, NamingScheme};
    use proptest::prelude::*;

    /// Full-sort reference: indices of the k largest weights, lower index
    /// first among ties.
    fn brute_force_top_k(w: &[f64], k: usize) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..w.len()).collect();
        idx.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));
        let mut mask = vec![false; w.len()];
        for &i in idx.iter().take(k) {
            mask[i] = true;
        }
        mask
    }

    fn one_tensor(delta: Vec<f32>, fim: Vec<f32>) -> (TensorArchive, FimScores, ModelTopology) {
        let name = "model.layers.0.mlp.up_proj.weight";
        let n = delta.len();
        let mut d = TensorArchive::new();
        d.insert(name, Tensor::new(vec![n], delta).unwrap()).unwrap();
        let mut f = TensorArchive::new();
        f.insert(name, Tensor::new(vec![n], fim).unwrap()).unwrap();
        let topo = parse_topology(&d, &NamingScheme::default()).unwrap();
        let scores = FimScores {
            elementwise: Some(f),
            per_layer: [(0, 1.0)].into(),
            meta: FimMeta { n_samples: 1, seq_len: 2, seed: 0, model_id: "t".into(), reduction: Reduction::Mean },
        };
        (d, scores, topo)
    }

    #[test]
    fn half_ratio_keeps_the_top_two() {
        let (d, f, topo) = one_tensor(vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 2.0, 3.0, 4.0]);
        let (t, out) = trim_task_vector(&d, Some(&f), &topo, 0.5, TrimMode::PerTensor, false).unwrap();
        assert_eq!(t.get("model.layers.0.mlp.up_proj.weight").unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(out.stats[0].retained, 2);
    }

    #[test]
    fn importance_multiplies_fisher_and_magnitude() {
        // |delta| favours index 0, Fisher favours index 1; the product decides.
        let (d, f, topo) = one_tensor(vec![-4.0, 1.0, 0.5], vec![1.0, 10.0, 1.0]);
        let (t, _) = trim_task_vector(&d, Some(&f), &topo, 0.3, TrimMode::PerTensor, false).unwrap();
        assert_eq!(t.get("model.layers.0.mlp.up_proj.weight").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn full_ratio_is_identity() {
        let (d, f, topo) = one_tensor(vec![1.0, -2.0, 3.0], vec![0.0, 1.0, 2.0]);
        let (t, _) = trim_task_vector(&d, Some(&f), &topo, 1.0, TrimMode::PerTensor, false).unwrap();
        assert_eq!(t, d);
    }

    #[test]
    fn ties_prefer_the_earlier_index() {
        assert_eq!(top_k_mask(&[1.0, 1.0, 1.0, 1.0], 2), vec![true, true, false, false]);
        assert_eq!(top_k_mask(&[0.0, 5.0, 5.0, 1.0], 1), vec![false, true, false, false]);
    }

    #[test]
    fn non_coefficient_tensors_pass_through() {
        let mut d = TensorArchive::new();
        d.insert("model.layers.0.mlp.up_proj.weight", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        d.insert("model.embed_tokens.weight", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        d.insert("model.layers.0.input_layernorm.weight", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let topo = parse_topology(&d, &NamingScheme::default()).unwrap();
        let (t, out) = trim_task_vector(&d, None, &topo, 0.5, TrimMode::PerTensor, true).unwrap();
        assert_eq!(t.get("model.embed_tokens.weight").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(t.get("model.layers.0.input_layernorm.weight").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(t.get("model.layers.0.mlp.up_proj.weight").unwrap().data(), &[0.0, 2.0]);
        assert_eq!(out.fallback_tensors, vec!["model.layers.0.mlp.up_proj.weight".to_string()]);
    }

    #[test]
    fn missing_fisher_without_fallback_is_an_error() {
        let (d, _, topo) = one_tensor(vec![1.0], vec![1.0]);
        assert!(matches!(
            trim_task_vector(&d, None, &topo, 0.5, TrimMode::PerTensor, false),
            Err(Error::InvalidPlan(_))
        ));
        assert!(trim_task_vector(&d, None, &topo, 0.0, TrimMode::PerTensor, true).is_err());
    }

    #[test]
    fn pooled_mode_ranks_across_tensors() {
        let mut d = TensorArchive::new();
        d.insert("model.layers.0.mlp.up_proj.weight", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        d.insert("model.layers.0.mlp.down_proj.weight", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        let topo = parse_topology(&d, &NamingScheme::default()).unwrap();
        let (t, out) = trim_task_vector(&d, None, &topo, 0.5, TrimMode::PooledLayer, true).unwrap();
        assert_eq!(t.get("model.layers.0.mlp.up_proj.weight").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(t.get("model.layers.0.mlp.down_proj.weight").unwrap().data(), &[3.0, 4.0]);
        assert_eq!(out.stats, vec![TrimStat { group: "layer.0".into(), retained: 2, total: 4 }]);
    }

    #[test]
    fn survivor_count_is_ceiling() {
        assert_eq!(survivor_count(0.4, 10_000), 4_000);
        assert_eq!(survivor_count(0.2, 7), 2);
        assert_eq!(survivor_count(0.1, 30), 3);
        assert_eq!(survivor_count(0.9, 10), 9);
        assert_eq!(survivor_count(1e-9, 5), 1);
        assert_eq!(survivor_count(1.0, 5), 5);
    }

    #[test]
    fn matches_full_sort_on_a_large_layer() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let delta: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fim: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (d, f, topo) = one_tensor(delta.clone(), fim.clone());
        let (_, out) = trim_task_vector(&d, Some(&f), &topo, 0.4, TrimMode::PerTensor, false).unwrap();
        let mask = &out.masks["model.layers.0.mlp.up_proj.weight"];
        assert_eq!(mask.iter().filter(|&&m| m).count(), 4_000);
        let w: Vec<f64> = fim.iter().zip(&delta).map(|(&a, &b)| a as f64 * (b as f64).abs()).collect();
        assert_eq!(mask, &brute_force_top_k(&w, 4_000));
    }

    proptest! {
        #[test]
        fn top_k_agrees_with_sort_and_nests(
            w in prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.5), Just(0.0)], 1..400),
            r1 in 0.01f64..1.0, r2 in 0.01f64..1.0,
        ) {
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            let k_lo = survivor_count(lo, w.len());
            let k_hi = survivor_count(hi, w.len());
            let a = top_k_mask(&w, k_lo);
            let b = top_k_mask(&w, k_hi);
            prop_assert_eq!(&a, &brute_force_top_k(&w, k_lo));
            prop_assert_eq!(a.iter().filter(|&&x| x).count(), k_lo);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(!x || *y);
            }
        }
    }
}
