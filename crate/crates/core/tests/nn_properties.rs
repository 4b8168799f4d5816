use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use cvqa_core::nn::{
    adam_step, backward, forward, init_model, softmax_cross_entropy, AdamConfig, AdamState,
    LayerParams, MlpModel, WeightDecayMode,
};
use cvqa_core::seed::EngineRng;

fn loss_with_mask_seed(model: &MlpModel<f64>, x: &Array2<f64>, y: &[u16], rate: f64, seed: u64) -> f64 {
    let mut rng = EngineRng::seed_from_u64(seed);
    let (logits, _) = forward(model, x, rate, true, &mut rng).unwrap();
    softmax_cross_entropy(&logits, y).unwrap().0
}

fn perturbed(model: &MlpModel<f64>, layer: usize, idx: usize, delta: f64) -> MlpModel<f64> {
    let mut l = model.layers().to_vec();
    let n = l[layer].weights.len();
    if idx < n {
        let c = l[layer].weights.ncols();
        l[layer].weights[[idx / c, idx % c]] += delta;
    } else {
        l[layer].biases[idx - n] += delta;
    }
    MlpModel::from_layers(l).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    /// Masks depend only on the generator, so reseeding identically freezes
    /// them and the finite difference sees the same subnetwork.
    #[test]
    fn gradients_match_finite_differences_under_dropout(
        input in 1usize..8,
        hidden in 1usize..8,
        layers in 0usize..3,
        classes in 2usize..6,
        rate in prop_oneof![Just(0.0), 0.05f64..0.5],
        seed: u64,
    ) {
        let mut rng = EngineRng::seed_from_u64(seed ^ 0x5eed);
        // Nonzero biases keep pre-activations off the ReLU kink when a whole
        // row of the previous layer is zeroed.
        let mut l = init_model::<f64>(input, hidden, layers, classes, seed).unwrap().layers().to_vec();
        for layer in &mut l {
            layer.biases.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let model = MlpModel::from_layers(l).unwrap();
        let x = Array2::from_shape_simple_fn((5, input), || rng.random_range(-1.0..1.0));
        let y: Vec<u16> = (0..5).map(|_| rng.random_range(0..classes) as u16).collect();
        let mask_seed = seed.wrapping_add(1);

        let mut mask_rng = EngineRng::seed_from_u64(mask_seed);
        let (logits, cache) = forward(&model, &x, rate, true, &mut mask_rng).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &y).unwrap();
        let grads = backward(&model, &cache, &dlogits).unwrap();

        let h = 1e-5;
        for (li, g) in grads.layers.iter().enumerate() {
            for (idx, &a) in g.weights.iter().chain(g.biases.iter()).enumerate() {
                let up = loss_with_mask_seed(&perturbed(&model, li, idx, h), &x, &y, rate, mask_seed);
                let down = loss_with_mask_seed(&perturbed(&model, li, idx, -h), &x, &y, rate, mask_seed);
                let n = (up - down) / (2.0 * h);
                let scale = a.abs().max(n.abs()).max(1e-6);
                prop_assert!((a - n).abs() / scale < 1e-4, "layer {li} param {idx}: {a} vs {n}");
            }
        }
    }
}

#[test]
fn dropout_preserves_expected_activations() {
    // Identity hidden and output layers expose the post-dropout activations.
    let eye = |n: usize| Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0f64 } else { 0.0 });
    let model = MlpModel::from_layers(vec![
        LayerParams { weights: eye(6), biases: Array1::zeros(6) },
        LayerParams { weights: eye(6), biases: Array1::zeros(6) },
    ])
    .unwrap();
    let x = Array2::from_shape_vec((1, 6), vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]).unwrap();
    let mut rng = EngineRng::seed_from_u64(4);
    let (eval, _) = forward(&model, &x, 0.2, false, &mut rng).unwrap();
    let mut sum = Array2::<f64>::zeros((1, 6));
    let draws = 10_000;
    for _ in 0..draws {
        sum += &forward(&model, &x, 0.2, true, &mut rng).unwrap().0;
    }
    for (m, e) in (sum / draws as f64).iter().zip(eval.iter()) {
        assert!((m - e).abs() <= 0.02 * e, "mean {m} vs eval {e}");
    }
}

fn trajectory(seed: u64) -> Vec<MlpModel<f32>> {
    let mut model: MlpModel<f32> = init_model(6, 10, 2, 3, seed).unwrap();
    let mut state = AdamState::new(&model, AdamConfig::default());
    let mut rng = EngineRng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((16, 6), || rng.random_range(-1.0f32..1.0));
    let y: Vec<u16> = (0..16).map(|i| (i % 3) as u16).collect();
    let mut out = Vec::new();
    for _ in 0..20 {
        let (logits, cache) = forward(&model, &x, 0.2, true, &mut rng).unwrap();
        let (_, d) = softmax_cross_entropy(&logits, &y).unwrap();
        let g = backward(&model, &cache, &d).unwrap();
        adam_step(&mut model, &mut state, &g, 1e-2, 1e-4, WeightDecayMode::Decoupled).unwrap();
        out.push(model.clone());
    }
    out
}

#[test]
fn fixed_seed_gives_bit_identical_trajectory() {
    let bits = |t: &[MlpModel<f32>]| -> Vec<u32> {
        t.iter()
            .flat_map(|m| m.layers().iter().flat_map(|l| l.weights.iter().chain(l.biases.iter())))
            .map(|v| v.to_bits())
            .collect()
    };
    assert_eq!(bits(&trajectory(9)), bits(&trajectory(9)));
    assert_ne!(bits(&trajectory(9)), bits(&trajectory(10)));
}
