//! Property tests over the numeric core, encoder, positional encoding and model.

mod common;

use common::*;
use gar::autodiff::softmax_rows;
use gar::gradcheck::{check_gradients, GradCheckConfig};
use gar::model::{predict, FusionMode, GarModel};
use gar::params::{bind, grads_of, LayerNormParams, Linear};
use gar::posenc::{apply_pe, pe_1d, pe_2d, BoxCenter};
use gar::rng::rng_for;
use gar::training::joint_loss;
use gar::transformer::{attention, encode, encoder_layer, init_encoder, multi_head, EncoderConfig, MultiHeadConfig};
use gar::{Graph, Mode, Tensor};
use proptest::prelude::*;

fn encoder_cfg(d: usize, heads: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        heads: MultiHeadConfig {
            d_model: d,
            num_heads: heads,
        },
        d_ff: 2 * d,
        dropout: 0.1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), m in 1usize..6, n in 1usize..9, scale in 0.1f64..50.0) {
        let x = random_tensor(seed, m, n).map(|v| v * scale);
        let p = softmax_rows(&x);
        for i in 0..m {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn max_over_set_ignores_row_order(seed in any::<u64>(), n in 1usize..10, d in 1usize..6) {
        let x = random_tensor(seed, n, d);
        let p = x.permute_rows(&random_perm(seed, n));
        let mut g = Graph::<f64>::inference();
        let (a, b) = (g.constant(x), g.constant(p));
        let (ma, mb) = (g.max_over_set(a).unwrap(), g.max_over_set(b).unwrap());
        prop_assert_eq!(g.value(ma), g.value(mb));
    }

    #[test]
    fn layer_norm_centres_rows(seed in any::<u64>(), n in 1usize..6, d in 2usize..12, shift in -100.0f64..100.0) {
        let x = random_tensor(seed, n, d).map(|v| v * 3.0 + shift);
        let mut g = Graph::<f64>::inference();
        let xv = g.constant(x);
        let ln = LayerNormParams::<Tensor>::identity(d);
        let lnv = LayerNormParams { gain: g.constant(ln.gain.clone()), bias: g.constant(ln.bias.clone()) };
        let y = lnv.forward(&mut g, xv).unwrap();
        for i in 0..n {
            let mean: f64 = g.value(y).row(i).iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_weights_are_row_stochastic(seed in any::<u64>(), n in 1usize..8, dk in 1usize..6) {
        let mut g = Graph::<f64>::inference();
        let q = g.constant(random_tensor(seed, n, dk).map(|v| v * 4.0));
        let k = g.constant(random_tensor(seed ^ 1, n, dk));
        let v = g.constant(random_tensor(seed ^ 2, n, 3));
        let (_, w) = attention(&mut g, q, k, v).unwrap();
        for i in 0..n {
            let row = g.value(w).row(i);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn encoder_without_pe_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..8, heads in 1usize..3) {
        let cfg = encoder_cfg(8, heads, 2);
        let layers = init_encoder::<f64>(&mut rng_for(seed, "init", &[]), &cfg);
        let s = random_tensor(seed, n, 8);
        let perm = random_perm(seed, n);
        let run = |x: Tensor| {
            let mut g = Graph::inference();
            let w = bind(&mut g, &layers);
            let xv = g.constant(x);
            let (y, _) = encode(&mut g, xv, &w, 0.1, false).unwrap();
            g.value(y).clone()
        };
        let a = run(s.clone()).permute_rows(&perm);
        let b = run(s.permute_rows(&perm));
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
        prop_assert_eq!(b.shape(), &[n, 8][..]);
    }

    #[test]
    fn equal_centres_keep_equivariance(seed in any::<u64>(), n in 1usize..8, x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let layers = init_encoder::<f64>(&mut rng_for(seed, "init", &[]), &encoder_cfg(8, 2, 1));
        let centers = vec![BoxCenter::new(x, y).unwrap(); n];
        let s = random_tensor(seed, n, 8);
        let perm = random_perm(seed, n);
        let run = |feat: Tensor| {
            let mut g = Graph::inference();
            let w = bind(&mut g, &layers);
            let xv = g.constant(feat);
            let xv = apply_pe(&mut g, xv, &centers, 100.0).unwrap();
            let (out, _) = encode(&mut g, xv, &w, 0.0, false).unwrap();
            g.value(out).clone()
        };
        let a = run(s.clone()).permute_rows(&perm);
        let b = run(s.permute_rows(&perm));
        prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
    }

    #[test]
    fn pe_1d_is_bounded(pos in -1000.0f64..1000.0, half in 1usize..40) {
        let pe = pe_1d::<f64>(pos, 2 * half).unwrap();
        prop_assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn model_group_logits_ignore_actor_order(seed in any::<u64>(), n in 1usize..8, kind in 0usize..4) {
        let (fusion, branches) = match kind {
            0 => (FusionMode::None, 1),
            1 => (FusionMode::EarlySum, 2),
            2 => (FusionMode::EarlyConcat, 2),
            _ => (FusionMode::Late { weights: vec![2.0, 1.0] }, 2),
        };
        let model = GarModel::<f64>::init(small_config(fusion, branches, 6), seed).unwrap();
        let feats: Vec<Tensor> = (0..branches).map(|b| random_tensor(seed + b as u64, n, 6)).collect();
        let centers = random_centers(seed, n);
        let perm = random_perm(seed, n);
        let pf: Vec<Tensor> = feats.iter().map(|f| f.permute_rows(&perm)).collect();
        let pc: Vec<BoxCenter> = perm.iter().map(|&p| centers[p]).collect();
        let a = model.predict_scene(&inputs(&feats, &centers), false).unwrap();
        let b = model.predict_scene(&inputs(&pf, &pc), false).unwrap();
        prop_assert!(a.activity_logits.max_abs_diff(&b.activity_logits).unwrap() <= 1e-9);
        prop_assert_eq!(predict(&a).0, predict(&b).0);
        prop_assert!(a.action_logits.permute_rows(&perm).max_abs_diff(&b.action_logits).unwrap() <= 1e-9);
    }

    #[test]
    fn pe_off_model_is_invariant_with_distinct_centres(seed in any::<u64>(), n in 2usize..8) {
        let mut cfg = small_config(FusionMode::None, 1, 6);
        cfg.use_pe = false;
        let model = GarModel::<f64>::init(cfg, seed).unwrap();
        let feats = vec![random_tensor(seed, n, 6)];
        let centers = random_centers(seed, n);
        let perm = random_perm(seed ^ 7, n);
        let pf = vec![feats[0].permute_rows(&perm)];
        let other_centers = random_centers(seed ^ 9, n);
        let a = model.predict_scene(&inputs(&feats, &centers), false).unwrap();
        let b = model.predict_scene(&inputs(&pf, &other_centers), false).unwrap();
        prop_assert!(a.activity_logits.max_abs_diff(&b.activity_logits).unwrap() <= 1e-9);
    }

    #[test]
    fn late_fusion_outputs_are_distributions(seed in any::<u64>(), n in 1usize..6, w0 in 0.1f64..5.0, w1 in 0.1f64..5.0) {
        let model = GarModel::<f64>::init(small_config(FusionMode::Late { weights: vec![w0, w1] }, 2, 6), seed).unwrap();
        let feats = vec![random_tensor(seed, n, 6), random_tensor(seed ^ 3, n, 6)];
        let centers = random_centers(seed, n);
        let p = model.predict_scene(&inputs(&feats, &centers), false).unwrap();
        let probs = p.activity_probs();
        prop_assert!((probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let ap = p.action_probs();
        for i in 0..n {
            prop_assert!((ap.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn joint_loss_is_the_sum_of_cross_entropies(seed in any::<u64>(), n in 1usize..6, g_label in 0usize..8) {
        let mut g = Graph::<f64>::inference();
        let act = g.constant(random_tensor(seed, 1, 8));
        let acts = g.constant(random_tensor(seed ^ 5, n, 9));
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 9).collect();
        let head = gar::model::HeadOutputs { action_logits: acts, activity_logits: act };
        let l = joint_loss(&mut g, &head, g_label, &labels, 1.0, 1.0).unwrap();
        let total = g.value(l.total).data()[0];
        let sum = g.value(l.activity).data()[0] + g.value(l.action).data()[0];
        prop_assert!((total - sum).abs() <= 4.0 * f64::EPSILON * sum.abs());
        prop_assert!(total >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// A graph composing every differentiable op.
    #[test]
    fn composed_graph_gradients_match_differences(seed in any::<u64>(), n in 1usize..4) {
        let x = random_tensor(seed, n, 4);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut rng = rng_for(seed, "init", &[]);
        let mut weights = vec![
            Linear::<Tensor>::init(&mut rng, 4, 4, true),
            Linear::<Tensor>::init(&mut rng, 4, 4, true),
            Linear::<Tensor>::init(&mut rng, 8, 3, true),
        ];
        for l in &mut weights {
            if let Some(b) = &mut l.bias {
                *b = random_tensor(seed ^ 11, 1, b.len()).reshape(vec![b.len()]).unwrap().map(|v| 0.3 * v);
            }
        }
        let forward = |g: &mut Graph<'_, f64>, w: &Vec<Linear<gar::Var>>| {
            let xv = g.constant(x.clone());
            let h = w[0].forward(g, xv).unwrap();
            let gain = g.constant(Tensor::full(&[4], 1.3));
            let bias = g.constant(Tensor::full(&[4], 0.1));
            let h = g.layer_norm(h, gain, bias).unwrap();
            let h = g.relu(h).unwrap();
            let s = g.softmax_rows(h).unwrap();
            let k = w[1].forward(g, xv).unwrap();
            let a = g.matmul_nt(s, k).unwrap();
            let a = g.matmul(a, k).unwrap();
            let a = g.dropout(a, 0.5).unwrap();
            let c = g.concat_cols(&[a, h]).unwrap();
            let c = g.scale(c, 0.7).unwrap();
            let logits = w[2].forward(g, c).unwrap();
            let pooled = g.max_over_set(logits).unwrap();
            let pooled = g.reshape(pooled, vec![1, 3]).unwrap();
            let l1 = g.cross_entropy(logits, &labels).unwrap();
            let l2 = g.cross_entropy(pooled, &[1]).unwrap();
            let p = g.softmax_rows(pooled).unwrap();
            let l3 = g.nll_probs(p, &[2]).unwrap();
            let s1 = g.add(l1, l2).unwrap();
            let s1 = g.add(s1, l3).unwrap();
            let e = g.sum(s).unwrap();
            let e = g.scale(e, 0.01).unwrap();
            g.add(s1, e).unwrap()
        };
        let analytic = {
            let mut g = Graph::new(Mode::Inference, 0);
            let w = bind(&mut g, &weights);
            let loss = forward(&mut g, &w);
            g.backward(loss).unwrap();
            grads_of(&g, &w)
        };
        let report = check_gradients(&mut weights, &analytic, GradCheckConfig::default(), |w| {
            let mut g = Graph::new(Mode::Inference, 0);
            let wv = bind(&mut g, w);
            let loss = forward(&mut g, &wv);
            Ok(g.value(loss).data()[0])
        }).unwrap();
        prop_assert!(report.passed(), "{:?}", report.mismatches.first());
    }
}

#[test]
fn single_identity_head_is_plain_attention() {
    let cfg = encoder_cfg(4, 1, 1);
    let mut layers = init_encoder::<f64>(&mut rng_for(3, "init", &[]), &cfg);
    let l = &mut layers[0];
    l.heads[0].query = Tensor::eye(4);
    l.heads[0].key = Tensor::eye(4);
    l.heads[0].value = Tensor::eye(4);
    l.output = Tensor::eye(4);
    let s = random_tensor(8, 5, 4);
    let mut g = Graph::inference();
    let w = bind(&mut g, &layers);
    let sv = g.constant(s);
    let mh = multi_head(&mut g, sv, &w[0], None).unwrap();
    let (plain, _) = attention(&mut g, sv, sv, sv).unwrap();
    assert_eq!(g.value(mh), g.value(plain));
}

#[test]
fn encoder_layer_keeps_shape_for_any_set_size() {
    let layers = init_encoder::<f64>(&mut rng_for(1, "init", &[]), &encoder_cfg(8, 2, 1));
    for n in 1..=12 {
        let mut g = Graph::new(Mode::Training, n as u64);
        let w = bind(&mut g, &layers);
        let s = g.constant(random_tensor(n as u64, n, 8));
        let y = encoder_layer(&mut g, s, &w[0], 0.1, None).unwrap();
        assert_eq!(g.value(y).shape(), &[n, 8]);
    }
}

#[test]
fn pe_2d_is_injective_on_a_grid() {
    let mut codes: Vec<Vec<u64>> = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            let c = BoxCenter::new(i as f64 / 19.0, j as f64 / 19.0).unwrap();
            let pe = pe_2d::<f64>(c, 128, 100.0).unwrap();
            codes.push(pe.data().iter().map(|v| v.to_bits()).collect());
        }
    }
    let n = codes.len();
    codes.sort();
    codes.dedup();
    assert_eq!(codes.len(), n);
}
