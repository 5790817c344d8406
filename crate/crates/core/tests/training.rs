use latformer::experts::{discretize_gates, expert_forward};
use latformer::mask::action_mask;
use latformer::model::{Model, ModelConfig, Variant};
use latformer::taskgen::{Grid, Pair};
use latformer::train::{evaluate, train, TrainConfig};
use latformer::{apply_action, DenseMatrix, ExpertFamily, LatticeAction, LatticeShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 8;

fn pairs(action: &LatticeAction, count: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let cells = (0..SIDE * SIDE)
                .map(|_| if rng.gen_bool(0.4) { rng.gen_range(1..10) } else { 0 })
                .collect();
            let input = Grid::new(SIDE, SIDE, cells).unwrap();
            let output = input.transformed(action).unwrap();
            Pair { input, output }
        })
        .collect()
}

fn model(family: ExpertFamily, variant: Variant) -> Model {
    Model::new(ModelConfig {
        shape: LatticeShape::grid(SIDE, SIDE).unwrap(),
        dim: 16,
        ffn_hidden: 32,
        variant,
        experts: vec![family],
        ..ModelConfig::default()
    })
    .unwrap()
}

fn desk_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-2,
        augmentations: 0,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn translation_is_learned_from_32_examples() {
    let action = LatticeAction::translate([1, 1]);
    let m = model(ExpertFamily::Translate, Variant::Latformer);
    let mut params = m.init_params(1).unwrap();
    train(&m, &mut params, &pairs(&action, 32, 1), &desk_config(4)).unwrap();
    let eval = evaluate(&m, &params, &pairs(&action, 20, 2)).unwrap();
    assert!(eval.solved(), "{eval:?}");
}

#[test]
fn learned_gates_reproduce_the_mask() {
    let action = LatticeAction::translate([3, 0]);
    let shape = LatticeShape::grid(SIDE, SIDE).unwrap();
    let m = model(ExpertFamily::Translate, Variant::LatformerNosmooth);
    let mut params = m.init_params(2).unwrap();
    train(&m, &mut params, &pairs(&action, 32, 3), &desk_config(4)).unwrap();
    let held_out = pairs(&action, 10, 4);
    let cells = held_out[0].input.class_indices();
    let gates = m.inferred_gates(&params, &cells).unwrap();
    let learned = expert_forward(&m.stacks()[0], &discretize_gates(&gates[0])).unwrap();
    assert_eq!(learned, action_mask(&action, &shape).unwrap());
    for pair in &held_out {
        let cells = pair.input.class_indices();
        let column = DenseMatrix::from_fn(cells.len(), 1, |i, _| cells[i] as f64);
        let moved = apply_action(&action, &shape, &column).unwrap();
        let expected: Vec<usize> = moved.as_slice().iter().map(|&c| c as usize).collect();
        assert_eq!(m.predict(&params, &cells).unwrap(), expected);
        assert_eq!(expected, pair.output.class_indices());
    }
}

#[test]
fn masks_beat_the_unmasked_baseline_on_rotation() {
    let action = LatticeAction::rotate(1);
    let train_pairs = pairs(&action, 32, 5);
    let test_pairs = pairs(&action, 20, 6);
    let accuracy = |variant| {
        let m = model(ExpertFamily::Rotate, variant);
        let mut params = m.init_params(3).unwrap();
        train(&m, &mut params, &train_pairs, &desk_config(4)).unwrap();
        evaluate(&m, &params, &test_pairs).unwrap().accuracy()
    };
    let baseline = accuracy(Variant::AttentionBaseline);
    let masked = accuracy(Variant::Latformer);
    assert!(masked > baseline, "latformer {masked} vs baseline {baseline}");
}
