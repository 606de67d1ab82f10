use mshvit_core::geometry::GeometryConfig;
use mshvit_core::params::ParamSet;
use mshvit_core::roi::PatchProbabilityMap;
use mshvit_core::slide::*;
use mshvit_core::{CoreError, NUM_CLASSES};
use mshvit_tensor::{grad_check, Graph, Reduction, Tensor, TensorError, DEFAULT_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(seed: u64, n: usize, d: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn one_stack_occupies_one_block() {
    let t = tokens(0, 64, 4);
    let grid = assemble_slide_grid(&[((0, 0), &t)], 8, 24).unwrap();
    assert_eq!(grid.occupied(), 64);
    for r in 0..24 {
        for c in 0..24 {
            assert_eq!(grid.occupancy[r * 24 + c], r < 8 && c < 8);
        }
    }
    assert_eq!(grid.cell(2, 3), &t.data()[(2 * 8 + 3) * 4..(2 * 8 + 3) * 4 + 4]);
    assert!(grid.cell(10, 10).iter().all(|&v| v == 0.0));
}

#[test]
fn duplicate_stack_is_idempotent() {
    let t = tokens(1, 64, 4);
    let one = assemble_slide_grid(&[((3, 6), &t)], 8, 24).unwrap();
    let two = assemble_slide_grid(&[((3, 6), &t), ((3, 6), &t)], 8, 24).unwrap();
    assert_eq!(one, two);
}

#[test]
fn overlaps_average() {
    let a = Tensor::new([4, 1], vec![1.0f32; 4]).unwrap();
    let b = Tensor::new([4, 1], vec![3.0f32; 4]).unwrap();
    let g = assemble_slide_grid(&[((0, 0), &a), ((0, 1), &b)], 2, 3).unwrap();
    assert_eq!(g.features, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
}

#[test]
fn out_of_bounds_origin_is_rejected() {
    let t = tokens(0, 64, 4);
    assert!(matches!(assemble_slide_grid(&[((17, 0), &t)], 8, 24), Err(CoreError::Geometry(_))));
}

#[test]
fn random_disjoint_layout_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        // pick 5 distinct blocks of the 3×3 block lattice, then jitter inside a 24 grid
        let mut blocks: Vec<(usize, usize)> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        for i in (1..blocks.len()).rev() {
            blocks.swap(i, rng.random_range(0..=i));
        }
        let ts: Vec<Tensor<f32>> = (0..5).map(|i| tokens(trial * 10 + i, 64, 2)).collect();
        let stacks: Vec<((usize, usize), &Tensor<f32>)> = blocks[..5].iter().zip(&ts).map(|(&(r, c), t)| ((r * 8, c * 8), t)).collect();
        let grid = assemble_slide_grid(&stacks, 8, 24).unwrap();
        // counting oracle
        let mut covered = vec![false; 24 * 24];
        for ((r0, c0), _) in &stacks {
            for r in 0..8 {
                for c in 0..8 {
                    covered[(r0 + r) * 24 + c0 + c] = true;
                }
            }
        }
        assert_eq!(grid.occupied(), covered.iter().filter(|&&c| c).count());
        assert_eq!(grid.occupied(), 320);
        let mut reversed = stacks.clone();
        reversed.reverse();
        assert_eq!(assemble_slide_grid(&reversed, 8, 24).unwrap(), grid);
    }
}

#[test]
fn pooled_token_counts() {
    assert_eq!(GeometryConfig::default().pooled_tokens(), 1024);
    let grid = assemble_slide_grid(&[((0, 0), &tokens(0, 64, 3))], 8, 24).unwrap();
    assert_eq!(pool_slide_grid(&grid).unwrap().shape(), &[64, 3]);
    let bad = mshvit_core::slide::SlideFeatureGrid {
        side: 10,
        d: 1,
        features: vec![0.0; 100],
        occupancy: vec![false; 100],
    };
    assert!(matches!(pool_slide_grid(&bad), Err(CoreError::Geometry(_))));
}

#[test]
fn constant_grid_pools_to_constant() {
    let t = Tensor::new([64 * 9, 2], [0.25f32, -0.5].repeat(64 * 9)).unwrap();
    // 3×3 stacks of 8×8 tile the full 24 grid
    let parts: Vec<Tensor<f32>> = (0..9).map(|i| Tensor::new([64, 2], t.data()[i * 128..(i + 1) * 128].to_vec()).unwrap()).collect();
    let stacks: Vec<_> = parts.iter().enumerate().map(|(i, p)| (((i / 3) * 8, (i % 3) * 8), p)).collect();
    let grid = assemble_slide_grid(&stacks, 8, 24).unwrap();
    let pooled = pool_slide_grid(&grid).unwrap();
    assert!(pooled.data().chunks(2).all(|c| c == [0.25, -0.5]));
}

#[test]
fn single_positive_cell_survives_pooling() {
    let mut v = vec![0.0f32; 4 * 3];
    v[3 * 3..].copy_from_slice(&[0.7, -0.2, 1.5]);
    let t = Tensor::new([4, 3], v).unwrap();
    // 2×2 stack at (3, 3): its last cell lands at (4, 4), inside pooled window (1, 1)
    let grid = assemble_slide_grid(&[((3, 3), &t)], 2, 6).unwrap();
    let pooled = pool_slide_grid(&grid).unwrap();
    let w = &pooled.data()[3 * 3..4 * 3];
    assert_eq!(w, &[0.7, 0.0, 1.5]);
    assert!(pooled.data()[..3].iter().all(|&x| x == 0.0));
}

fn tiny_slide() -> (SlideConfig, GeometryConfig) {
    (
        SlideConfig {
            d_model: 4,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        GeometryConfig {
            stack_px: 32,
            grid: 2,
            slide_grid: 6,
            ..GeometryConfig::toy()
        },
    )
}

fn random_params(cfg: &SlideConfig, geom: &GeometryConfig, seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: ParamSet<f32> = ParamSet::init(&slide_param_specs(cfg, geom), &mut rng);
    let mut out = ParamSet::new();
    for (name, t) in base.iter() {
        let data: Vec<f64> = (0..t.numel()).map(|_| rng.random_range(-0.6..0.6)).collect();
        out.insert(name, Tensor::from_f64(t.shape().to_vec(), &data).unwrap());
    }
    out
}

#[test]
fn zero_head_scores_twenty() {
    let (cfg, geom) = (SlideConfig::default(), GeometryConfig::toy());
    let mut params: ParamSet<f32> = ParamSet::init(&slide_param_specs(&cfg, &geom), &mut ChaCha8Rng::seed_from_u64(0));
    for n in ["head.w", "head.b"] {
        params.get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let grid = assemble_slide_grid(&[((4, 4), &tokens(2, 64, 32))], 8, 24).unwrap();
    let (diag, _) = mshvit_core::train::classify_grid(&params, &cfg, &grid.to_chw()).unwrap();
    assert!(diag.scores.iter().all(|&s| (s - 20.0).abs() < 1e-9));
    assert_eq!(diag.predicted_class, 0);
}

#[test]
fn token_count_mismatch_is_config_error() {
    let (cfg, geom) = tiny_slide();
    let params = random_params(&cfg, &geom, 0);
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let pooled = g.constant(Tensor::new([5, 4], vec![0.0; 20]).unwrap());
    assert!(matches!(classify_pooled(&mut g, &b, &cfg, pooled), Err(CoreError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_sum_to_hundred(seed in any::<u64>()) {
        let (cfg, geom) = tiny_slide();
        let params: ParamSet<f32> = random_params(&cfg, &geom, seed).cast();
        let grid = assemble_slide_grid(&[((1, 2), &tokens(seed, 4, 4))], 2, 6).unwrap();
        let (d, logits) = mshvit_core::train::classify_grid(&params, &cfg, &grid.to_chw()).unwrap();
        prop_assert!((d.scores.iter().sum::<f64>() - 100.0).abs() < 1e-4);
        prop_assert_eq!(d.predicted_class, mshvit_core::roi::argmax_lowest(&d.scores));
        prop_assert_eq!(logits.len(), NUM_CLASSES);
    }

    #[test]
    fn assembly_order_does_not_matter(seed in any::<u64>()) {
        let (cfg, geom) = tiny_slide();
        let params: ParamSet<f32> = random_params(&cfg, &geom, 7).cast();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts: Vec<Tensor<f32>> = (0..4).map(|i| tokens(seed ^ i, 4, 4)).collect();
        let mut stacks: Vec<((usize, usize), &Tensor<f32>)> = ts.iter().map(|t| ((rng.random_range(0..5), rng.random_range(0..5)), t)).collect();
        let a = assemble_slide_grid(&stacks, 2, 6).unwrap();
        stacks.reverse();
        let b = assemble_slide_grid(&stacks, 2, 6).unwrap();
        let sa = mshvit_core::train::classify_grid(&params, &cfg, &a.to_chw()).unwrap();
        let sb = mshvit_core::train::classify_grid(&params, &cfg, &b.to_chw()).unwrap();
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn unit_weights_match_plain_ce(seed in any::<u64>(), label in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::new([1, 5], (0..5).map(|_| rng.random_range(-5.0f64..5.0)).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.param(logits.clone());
        let w = slide_loss(&mut g, x, label, &[1.0; 5]).unwrap();
        let gw = g.backward(w).unwrap();
        let mut h = Graph::new();
        let y = h.param(logits);
        let p = h.cross_entropy(y, &[label], None, Reduction::Sum).unwrap();
        let gp = h.backward(p).unwrap();
        prop_assert_eq!(g.value(w).item().to_bits(), h.value(p).item().to_bits());
        prop_assert_eq!(gw.get(x).unwrap().data(), gp.get(y).unwrap().data());
    }
}

#[test]
fn uniform_logits_give_ln5() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 5], vec![0.4; 5]).unwrap());
    let l = slide_loss(&mut g, x, 3, &[1.0; 5]).unwrap();
    assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-9);
}

#[test]
fn doubling_true_class_weight_doubles_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 5], vec![0.3, -1.0, 2.0, 0.0, 0.5]).unwrap());
    let w = [0.7, 1.2, 0.9, 1.1, 1.0];
    let mut w2 = w;
    w2[2] *= 2.0;
    let a = slide_loss(&mut g, x, 2, &w).unwrap();
    let b = slide_loss(&mut g, x, 2, &w2).unwrap();
    assert!((g.value(b).item() - 2.0 * g.value(a).item()).abs() < 1e-12);
    assert!(slide_loss(&mut g, x, 2, &[1.0, 0.0, 1.0, 1.0, 1.0]).is_err());
    assert!(slide_loss(&mut g, x, 5, &w).is_err());
}

#[test]
fn inverse_frequency_example() {
    let w = inverse_frequency_weights(&[10, 10, 20, 40, 20]);
    // oracle: (1/h) scaled so the mean is one
    let inv = [10.0, 10.0, 20.0, 40.0, 20.0].map(|h: f64| 1.0 / h);
    let s: f64 = inv.iter().sum();
    for c in 0..5 {
        assert!((w[c] - inv[c] * 5.0 / s).abs() < 1e-12);
    }
    assert_eq!(w.map(|v| (v * 13.0).round()), [20.0, 20.0, 10.0, 5.0, 10.0]);
}

fn map_of(cells: Vec<[f64; NUM_CLASSES]>, fg: Vec<f32>) -> PatchProbabilityMap {
    let n = cells.len();
    let grid = (n as f64).sqrt() as usize;
    PatchProbabilityMap {
        grid,
        origin: (0, 0),
        argmax: cells.iter().map(|p| mshvit_core::roi::argmax_lowest(p) as u8).collect(),
        probs: cells,
        foreground: if fg.is_empty() { vec![1.0; n] } else { fg },
    }
}

#[test]
fn topk_single_cell() {
    let p = [0.1, 0.2, 0.4, 0.2, 0.1];
    let (d, raw) = topk_mean_baseline(&[map_of(vec![p], vec![])], 1, 0.1).unwrap();
    assert_eq!(raw, p);
    for c in 0..5 {
        assert!((d.scores[c] - p[c] * 100.0).abs() < 1e-9);
    }
    assert_eq!(d.predicted_class, 2);
}

#[test]
fn topk_uniform_ties_to_nfd() {
    let (d, _) = topk_mean_baseline(&[map_of(vec![[0.2; 5]; 16], vec![])], 10, 0.1).unwrap();
    assert_eq!(d.predicted_class, 0);
}

#[test]
fn topk_sort_oracle() {
    let mut cells = vec![[0.6, 0.1, 0.1, 0.1, 0.1]; 100];
    for i in (0..100).step_by(10) {
        cells[i] = [0.025, 0.025, 0.9, 0.025, 0.025];
    }
    let (_, raw) = topk_mean_baseline(&[map_of(cells, vec![])], 10, 0.1).unwrap();
    assert!((raw[2] - 0.9).abs() < 1e-12);
    assert!((raw[0] - 0.6).abs() < 1e-12);
}

#[test]
fn topk_uses_foreground_cells_only() {
    let cells = vec![[0.9, 0.1, 0.0, 0.0, 0.0], [0.1, 0.9, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0], [0.0; 5]];
    let (d, raw) = topk_mean_baseline(&[map_of(cells.clone(), vec![1.0, 1.0, 0.05, 0.0])], 5, 0.1).unwrap();
    assert_eq!(raw[2], 0.0);
    assert_eq!(d.predicted_class, 0);
    assert!(matches!(topk_mean_baseline(&[map_of(cells, vec![0.0; 4])], 5, 0.1), Err(CoreError::EmptySlide)));
    assert!(topk_mean_baseline(&[], 0, 0.1).is_err());
}

#[test]
fn end_to_end_gradient_check() {
    let (cfg, geom) = tiny_slide();
    let params = random_params(&cfg, &geom, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let chw: Tensor<f64> = Tensor::new([4, 6, 6], (0..144).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let weights = [1.3, 0.6, 1.0, 0.8, 1.3];
    let mut inputs: Vec<Tensor<f64>> = params.tensors().to_vec();
    inputs.push(chw);
    let to_t = |e: CoreError| TensorError::Argument(e.to_string());
    let report = grad_check(
        |g, vars| {
            let (last, ps) = vars.split_last().unwrap();
            let b = params.bind_vars(ps).map_err(to_t)?;
            let logits = slide_forward(g, &b, &cfg, *last).map_err(to_t)?;
            slide_loss(g, logits, 3, &weights).map_err(to_t)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    println!("stage-2: max rel err {:.3e} over {} elements", report.max_rel_error, report.elements);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}
