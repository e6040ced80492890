use pico_core::bottleneck::{self, BottleneckConfig};
use pico_core::decoder::{self, DecoderConfig};
use pico_core::graph::Graph;
use pico_core::metrics;
use pico_core::model::{self, ModelConfig};
use pico_core::params::ParamStore;
use pico_core::rng;
use pico_core::Tensor;
use proptest::prelude::*;

fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn values(n: usize, lo: f32, hi: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(lo..hi, n)
}

fn bottleneck_store(c: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let cfg = BottleneckConfig {
        channels: c,
        ..BottleneckConfig::default()
    };
    bottleneck::init(&mut store, &mut rng::stream(seed, "init"), &cfg, true);
    store
}

fn elu1(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Explicit N×N kernel weights, row-normalized.
fn quadratic_oracle(q: &[f32], k: &[f32], v: &[f32], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let mut w = vec![0.0; n];
        for j in 0..n {
            w[j] = (0..d).map(|c| elu1(q[i * d + c] as f64) * elu1(k[j * d + c] as f64)).sum();
        }
        let total: f64 = w.iter().sum::<f64>() + 1e-6;
        for c in 0..d {
            out[i * d + c] = (0..n).map(|j| w[j] * v[j * d + c] as f64).sum::<f64>() / total;
        }
    }
    out
}

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for (i, &p) in scores.iter().enumerate() {
        for (j, &q) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                hits += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    hits / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_product_gradient_is_exact(
        a in values(6, -3.0, 3.0),
        b in values(6, -3.0, 3.0),
    ) {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(tensor(&[6], a.clone()), true);
        let y = g.leaf(tensor(&[6], b.clone()), true);
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        prop_assert_eq!(g.grad(x).unwrap().data(), &b[..]);
        prop_assert_eq!(g.grad(y).unwrap().data(), &a[..]);
    }

    #[test]
    fn gate_stays_in_open_unit_interval(z in values(2 * 16 * 8, -8.0, 8.0), seed in 0u64..100) {
        let store = bottleneck_store(8, seed);
        let mut g = Graph::new();
        let zv = g.constant(tensor(&[32, 8], z));
        let gate = bottleneck::channel_gate(&mut g, &store, zv, 2).unwrap();
        for &v in g.value(gate).data() {
            prop_assert!(v > 0.0 && v < 1.0, "gate {}", v);
        }
    }

    #[test]
    fn fusion_is_a_convex_combination(z in values(16 * 8, -3.0, 3.0), seed in 0u64..100) {
        let store = bottleneck_store(8, seed);
        let mut g = Graph::new();
        let zv = g.constant(tensor(&[16, 8], z));
        let gate = bottleneck::channel_gate(&mut g, &store, zv, 1).unwrap();
        let hi = bottleneck::path_high(&mut g, &store, zv).unwrap();
        let lo = bottleneck::path_low(&mut g, &store, zv).unwrap();
        let f = bottleneck::fuse(&mut g, hi, lo, gate, 1).unwrap();
        let (h, l, y) = (g.value(hi).data(), g.value(lo).data(), g.value(f).data());
        for i in 0..y.len() {
            let (a, b) = (h[i].min(l[i]), h[i].max(l[i]));
            prop_assert!(y[i] >= a - 1e-5 && y[i] <= b + 1e-5);
        }
    }

    #[test]
    fn la3_matches_explicit_weights(
        n in 1usize..=32,
        d in 1usize..=16,
        seed in any::<u64>(),
    ) {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "la3");
        let mut draw = || (0..n * d).map(|_| r.random_range(-2.0f32..2.0)).collect::<Vec<_>>();
        let (q, k, v) = (draw(), draw(), draw());
        let cfg = DecoderConfig::default();
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(tensor(&[n, d], q.clone())), g.constant(tensor(&[n, d], k.clone())), g.constant(tensor(&[n, d], v.clone())));
        let y = decoder::la3_attention(&mut g, qv, kv, vv, &cfg).unwrap();
        let want = quadratic_oracle(&q, &k, &v, n, d);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            prop_assert!((*a as f64 - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn la3_is_permutation_equivariant(n in 2usize..=16, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::Rng as _;
        let d = 4;
        let mut r = rng::stream(seed, "perm");
        let mut draw = || (0..n * d).map(|_| r.random_range(-2.0f32..2.0)).collect::<Vec<_>>();
        let (q, k, v) = (draw(), draw(), draw());
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permute = |x: &[f32]| perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
        let cfg = DecoderConfig::default();
        let run = |q: Vec<f32>, k: Vec<f32>, v: Vec<f32>| {
            let mut g = Graph::new();
            let (a, b, c) = (g.constant(tensor(&[n, d], q)), g.constant(tensor(&[n, d], k)), g.constant(tensor(&[n, d], v)));
            let y = decoder::la3_attention(&mut g, a, b, c, &cfg).unwrap();
            g.value(y).data().to_vec()
        };
        let base = permute(&run(q.clone(), k.clone(), v.clone()));
        let moved = run(permute(&q), permute(&k), permute(&v));
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn auroc_matches_pairwise_oracle(
        raw in prop::collection::vec((0u8..6, any::<bool>()), 2..40),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let got = metrics::auroc(&scores, &labels).unwrap();
        prop_assert!((got - pairwise_auroc(&scores, &labels)).abs() < 1e-9);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let comp = metrics::auroc(&scores, &flipped).unwrap();
        prop_assert!((got + comp - 1.0).abs() < 1e-9);
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        prop_assert!((metrics::auroc(&warped, &labels).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn aupro_ignores_monotone_rescaling(
        map in values(64, 0.0, 1.0),
        mask in prop::collection::vec(any::<bool>(), 64),
    ) {
        let mask_t = tensor(&[8, 8], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        prop_assume!(mask.iter().any(|&m| m) && mask.iter().any(|&m| !m));
        let a = metrics::aupro(&[tensor(&[8, 8], map.clone())], &[mask_t.clone()], 0.3).unwrap();
        let warped: Vec<f32> = map.iter().map(|v| v * v * 5.0 + 1.0).collect();
        let b = metrics::aupro(&[tensor(&[8, 8], warped)], &[mask_t], 0.3).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn smoothing_preserves_interior_mass(px in 2usize..14, py in 2usize..14) {
        let mut m = Tensor::zeros(&[16, 16]);
        m.data_mut()[py * 16 + px] = 1.0;
        let s = metrics::smooth(&m).unwrap();
        let total: f32 = s.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-5, "mass {}", total);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn smoothing_commutes_with_interior_shifts(seed in any::<u64>()) {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "shift");
        let mut base = Tensor::zeros(&[20, 20]);
        for y in 6..12 {
            for x in 6..12 {
                base.data_mut()[y * 20 + x] = r.random_range(0.0..1.0);
            }
        }
        let mut shifted = Tensor::zeros(&[20, 20]);
        for y in 0..18 {
            for x in 0..18 {
                shifted.data_mut()[(y + 2) * 20 + x + 2] = base.data()[y * 20 + x];
            }
        }
        let a = metrics::smooth(&base).unwrap();
        let b = metrics::smooth(&shifted).unwrap();
        for y in 4..14 {
            for x in 4..14 {
                prop_assert!((a.data()[y * 20 + x] - b.data()[(y + 2) * 20 + x + 2]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn model_outputs_are_finite(pixels in values(2 * 32 * 32, 0.0, 1.0), seed in 0u64..4) {
        let m = model::Model::new(ModelConfig::default(), seed).unwrap();
        let a = tensor(&[32, 32], pixels[..1024].to_vec());
        let b = tensor(&[32, 32], pixels[1024..].to_vec());
        for inf in m.infer(&[&a, &b]).unwrap() {
            prop_assert!(inf.recon.all_finite() && inf.x_norm.all_finite() && inf.z_out.all_finite());
        }
    }
}

/// Exhaustive per-region-overlap curve: every distinct score is a threshold.
fn aupro_oracle(map: &[f64], region: &[usize], regions: usize, limit: f64) -> f64 {
    let mut ts: Vec<f64> = map.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let normal = region.iter().filter(|&&r| r == 0).count() as f64;
    let mut curve = vec![(0.0, 0.0)];
    for t in ts {
        let fp = map.iter().zip(region).filter(|(s, r)| **r == 0 && **s >= t).count() as f64;
        let mut pro = 0.0;
        for id in 1..=regions {
            let size = region.iter().filter(|&&r| r == id).count() as f64;
            let hit = map.iter().zip(region).filter(|(s, r)| **r == id && **s >= t).count() as f64;
            pro += hit / size;
        }
        curve.push((fp / normal, pro / regions as f64));
    }
    curve.push((1.0, 1.0));
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

#[test]
fn aupro_matches_exhaustive_oracle() {
    use rand::Rng as _;
    let mut r = rng::stream(1, "aupro-oracle");
    for case in 0..100 {
        let side = r.random_range(4..=16);
        let n = side * side;
        let mut mask = Tensor::zeros(&[side, side]);
        for _ in 0..r.random_range(1..4) {
            let (cy, cx, rad) = (r.random_range(0..side), r.random_range(0..side), r.random_range(0..3));
            for y in cy.saturating_sub(rad)..(cy + rad + 1).min(side) {
                for x in cx.saturating_sub(rad)..(cx + rad + 1).min(side) {
                    mask.data_mut()[y * side + x] = 1.0;
                }
            }
        }
        if mask.data().iter().all(|&v| v > 0.5) {
            continue;
        }
        let levels = if case % 2 == 0 { 5 } else { 1000 };
        let map = Tensor::new(
            &[side, side],
            (0..n).map(|_| r.random_range(0..levels) as f32 / levels as f32).collect(),
        )
        .unwrap();
        let (labels, count) = metrics::label_regions(&mask).unwrap();
        let scores: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
        let want = aupro_oracle(&scores, &labels, count, 0.3);
        let got = metrics::aupro(&[map], &[mask], 0.3).unwrap();
        assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
    }
}

#[test]
fn aupro_hand_cases() {
    let mask = tensor(&[4, 4], (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect());
    let perfect = tensor(&[4, 4], (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect());
    assert!((metrics::aupro(&[perfect], &[mask.clone()], 0.3).unwrap() - 1.0).abs() < 1e-12);
    let inverted = tensor(&[4, 4], (0..16).map(|i| if i < 4 { 0.0 } else { 1.0 }).collect());
    assert!(metrics::aupro(&[inverted], &[mask.clone()], 0.3).unwrap().abs() < 1e-12);
    let flat = Tensor::full(&[4, 4], 0.5);
    assert!((metrics::aupro(&[flat], &[mask], 0.3).unwrap() - 0.15).abs() < 1e-12);
}

#[test]
fn low_path_has_bounded_rank() {
    // The low path factors through C/4 hidden units, so its response to
    // many inputs, centered by the output bias, spans at most C/4 dimensions.
    let c = 16;
    let store = bottleneck_store(c, 3);
    let mut store64: ParamStore<f64> = store.cast();
    let b2 = store64.position("bneck.low.b2").unwrap();
    store64.entry_mut(b2).value.data_mut().fill(0.0);
    use rand::Rng as _;
    let mut r = rng::stream(0, "rank");
    let rows = 64;
    let z: Vec<f64> = (0..rows * c).map(|_| r.random_range(-2.0..2.0)).collect();
    let mut g: Graph<f64> = Graph::new();
    let zv = g.constant(Tensor::new(&[rows, c], z).unwrap());
    let y = bottleneck::path_low(&mut g, &store64, zv).unwrap();
    let y = g.value(y).data().to_vec();
    let rank = numerical_rank(&y, rows, c, 1e-5);
    assert!(rank <= c / 4, "rank {rank}");
    assert!(rank > 0);
}

/// Singular values below `tol · σ_max` are treated as zero.
fn numerical_rank(a: &[f64], m: usize, n: usize, tol: f64) -> usize {
    let sv = nalgebra::DMatrix::from_row_slice(m, n, a).singular_values();
    let top = sv.max();
    sv.iter().filter(|&&s| s > tol * top).count()
}

#[test]
fn rank_helper_on_known_matrix() {
    // Outer product of two vectors has rank 1.
    let u = [1.0, 2.0, -1.0, 0.5];
    let v = [3.0, -1.0, 2.0];
    let a: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
    assert_eq!(numerical_rank(&a, 4, 3, 1e-5), 1);
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(numerical_rank(&eye, 3, 3, 1e-5), 3);
}
