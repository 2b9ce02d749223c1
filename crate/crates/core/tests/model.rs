mod common;

use common::oracle::formula_param_count;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reachnet::augment::resize_sample;
use reachnet::model::{Model, ModelConfig};
use reachnet::phantom::{generate_phantom, PhantomConfig};
use reachnet::tensor::{AdamW, AdamWConfig, Mode};
use reachnet::training::{batch_tensors, train_step};
use reachnet::{Tape, Tensor};

#[test]
fn parameter_count_matches_formula() {
    let configs = [
        ModelConfig::default(),
        ModelConfig { base_filters: 2, ..Default::default() },
        ModelConfig { max_filters: 64, attention_heads: 4, ..Default::default() },
        ModelConfig { positional_embedding: false, attention_grid: 4, ..Default::default() },
    ];
    for c in configs {
        let m = Model::<f32>::build(&c, 0).unwrap();
        assert_eq!(m.param_count(), formula_param_count(&c), "{c:?}");
    }
    assert_eq!(formula_param_count(&ModelConfig::default()), 830_419);
}

#[test]
fn default_checkpoint_fits_in_five_megabytes() {
    let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.save(&p).unwrap();
    let size = std::fs::metadata(&p).unwrap().len();
    assert!(size <= 5_000_000, "{size} bytes");
    assert!(size >= 4 * m.param_count() as u64);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let c = ModelConfig { base_filters: 4, ..Default::default() };
    let mut m = Model::<f32>::build(&c, 11).unwrap();
    for (i, s) in m.running_stats_mut().iter_mut().enumerate() {
        s.mean.iter_mut().for_each(|v| *v = 0.01 * i as f32);
        s.var.iter_mut().for_each(|v| *v = 1.0 + 0.1 / (i + 1) as f32);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.save(&p).unwrap();
    let back = Model::<f32>::load(&p).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::new(&[2, 1, 128, 160], (0..2 * 128 * 160).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn corrupt_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    let e = Model::<f32>::load(&p).unwrap_err();
    assert!(e.is_validation());
    assert!(e.to_string().contains("bad.ckpt"));
}

#[test]
fn attention_sees_36_tokens_at_every_resolution() {
    let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
    for (side, grid) in [(512, 4), (768, 6), (1024, 8)] {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[1, 1, side, side], 0.1));
        let out = m.forward(&mut tape, &vars, x, Mode::Eval).unwrap();
        assert_eq!(out.tokens, 36);
        assert_eq!(out.bottleneck_grid, (grid, grid));
        assert_eq!(tape.shape(out.logits), &[1, 3, side, side]);
        assert_eq!(tape.shape(out.attention)[1], 36);
    }
}

#[test]
fn reflect_padding_round_trip_shape() {
    let m = Model::<f32>::build(&ModelConfig { base_filters: 2, ..Default::default() }, 0).unwrap();
    let y = m.predict(&Tensor::full(&[1, 1, 250, 250], 0.0)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 250, 250]);
    let y = m.predict(&Tensor::full(&[2, 1, 256, 256], 0.0)).unwrap();
    assert_eq!(y.shape(), &[2, 3, 256, 256]);
}

#[test]
fn zeroed_attention_is_the_identity() {
    let mut m = Model::<f64>::build(&ModelConfig::default(), 0).unwrap();
    let names = m.param_names().to_vec();
    for (name, p) in names.iter().zip(m.params_mut()) {
        if name.starts_with("attn.") {
            p.data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(6, 6), (5, 7), (1, 1)] {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let data: Vec<f64> = (0..2 * 128 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = tape.constant(Tensor::new(&[2, 128, h, w], data).unwrap());
        let (out, _, tokens) = m.ra_attention(&mut tape, &vars, x).unwrap();
        assert_eq!(tokens, 36);
        assert_eq!(tape.value(out).data(), tape.value(x).data());
    }
}

#[test]
fn overfits_a_fixed_batch() {
    let cfg = PhantomConfig::default();
    let samples: Vec<_> = (0..2).map(|i| resize_sample(&generate_phantom(&cfg, i).unwrap(), 128, 128).unwrap()).collect();
    let (x, y) = batch_tensors(&samples, 0.5, 0.5).unwrap();
    let mut m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
    let names = m.param_names().to_vec();
    let mut opt = AdamW::new(AdamWConfig::default());
    let losses: Vec<f64> = (0..50).map(|_| train_step(&mut m, &mut opt, &names, x.clone(), &y, 3e-3).unwrap()).collect();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
}
