#![allow(dead_code)]

pub mod oracle;

use gar::model::{BranchInput, FusionMode, ModelConfig};
use gar::posenc::BoxCenter;
use gar::rng::rng_for;
use gar::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;

pub fn random_tensor(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = rng_for(seed, "test-tensor", &[rows as u64, cols as u64]);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_centers(seed: u64, n: usize) -> Vec<BoxCenter> {
    let mut rng = rng_for(seed, "test-centers", &[n as u64]);
    (0..n)
        .map(|_| BoxCenter::new(rng.random::<f64>(), rng.random::<f64>()).unwrap())
        .collect()
}

pub fn random_perm(seed: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng_for(seed, "test-perm", &[n as u64]));
    p
}

pub fn inputs<'a>(feats: &'a [Tensor], centers: &'a [BoxCenter]) -> Vec<BranchInput<'a, f64>> {
    feats
        .iter()
        .map(|features| BranchInput { features, centers })
        .collect()
}

/// Small model: d = 8, two heads, one layer, dropout off.
pub fn small_config(fusion: FusionMode, branches: usize, f: usize) -> ModelConfig {
    ModelConfig {
        branches: (0..branches).collect(),
        branch_dims: vec![f; branches],
        d_model: 8,
        num_heads: 2,
        num_layers: 1,
        d_ff: 16,
        dropout: 0.0,
        num_actions: 4,
        num_activities: 4,
        fusion,
        ..ModelConfig::default()
    }
}
