//! Engine contracts: streamed/parallel equivalence, memory clamping,
//! chunk independence, padding soundness, checkpoint fidelity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slidemamba::data::TaskKind;
use slidemamba::engine::{
    chunk_iter, forward_stream, forward_train, forward_train_masked, load_checkpoint,
    peak_memory_report, save_checkpoint, EngineLedgers, ModelDims, ModelParams, Structure,
};
use slidemamba::tensor::{Dtype, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn toy_model(d: usize, chunk_len: usize, outputs: usize, structure: Structure, seed: u64) -> ModelParams {
    let mut dims = ModelDims::new(d, outputs);
    dims.chunk_len = chunk_len;
    dims.d_state = 4;
    let mut p = ModelParams::init(dims, structure, TaskKind::Classification, seed).unwrap();
    p.randomize(seed ^ 0xabc);
    p
}

fn train_logits(params: &ModelParams, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new(false);
    let vars = params.bind(&mut tape);
    let fwd = forward_train(&mut tape, &vars, x).unwrap();
    tape.value(fwd.logits).data().to_vec()
}

#[test]
fn stream_equals_train_over_random_configs() {
    let mut r = rng(40);
    for case in 0..30 {
        let d = [3usize, 5, 8][case % 3];
        let l = [4usize, 7, 16][(case / 3) % 3];
        let n: usize = r.gen_range(1..300);
        let m = n.div_ceil(l);
        let b_inf = match case % 4 {
            0 => 1,
            1 => 2,
            2 => m.max(1),
            _ => r.gen_range(1..=m.max(1) + 2),
        };
        let params = toy_model(d, l, 3, Structure::Full, case as u64);
        let x = random_tensor(&[n, d], &mut r);
        let reference = train_logits(&params, &x);
        let streamed =
            forward_stream(chunk_iter(&x, l), &params, b_inf, None, false).unwrap();
        for (s, t) in streamed.logits.data().iter().zip(&reference) {
            let rel = (s - t).abs() / (t.abs() + 1e-8);
            assert!(rel < 1e-6, "case {case} (n={n}, l={l}, b_inf={b_inf}): {s} vs {t}");
        }
    }
}

#[test]
fn stream_equals_train_for_every_structure() {
    let mut r = rng(41);
    for structure in [Structure::Full, Structure::LocalOnly, Structure::GlobalOnly, Structure::Reversed] {
        let params = toy_model(4, 8, 2, structure, 7);
        let n = 53;
        let x = random_tensor(&[n, 4], &mut r);
        let reference = train_logits(&params, &x);
        let streamed = forward_stream(chunk_iter(&x, 8), &params, 3, None, false).unwrap();
        for (s, t) in streamed.logits.data().iter().zip(&reference) {
            assert!((s - t).abs() < 1e-9, "{structure:?}: {s} vs {t}");
        }
    }
}

#[test]
fn single_tile_bag_matches_train() {
    let params = toy_model(5, 8, 2, Structure::Full, 3);
    let mut r = rng(42);
    let x = random_tensor(&[1, 5], &mut r);
    let reference = train_logits(&params, &x);
    let streamed = forward_stream(chunk_iter(&x, 8), &params, 4, None, false).unwrap();
    assert_eq!(streamed.logits.data(), reference.as_slice());
}

#[test]
fn local_peak_is_constant_in_slide_size() {
    let params = toy_model(16, 8, 2, Structure::Full, 5);
    let rows = peak_memory_report(&[64, 512, 4096], &params, 4).unwrap();
    assert_eq!(rows[0].local_peak, rows[1].local_peak, "local peak varies with N");
    assert_eq!(rows[1].local_peak, rows[2].local_peak, "local peak varies with N");
    // Retained tokens grow exactly with the chunk count.
    for row in &rows {
        let m = row.n.div_ceil(8) as u64;
        assert_eq!(row.tokens_bytes, m * 16 * 8, "tokens at n={}", row.n);
    }
    assert!(rows[2].global_peak > rows[0].global_peak);
}

#[test]
fn doubling_minibatch_roughly_doubles_local_peak() {
    let params = toy_model(16, 8, 2, Structure::Full, 5);
    let a = peak_memory_report(&[4096], &params, 2).unwrap()[0].local_peak;
    let b = peak_memory_report(&[4096], &params, 4).unwrap()[0].local_peak;
    // Parameter bindings are a constant overhead shared by both.
    let ratio = b as f64 / a as f64;
    assert!(ratio > 1.5 && ratio < 2.1, "b_inf 2->4 scaled local peak by {ratio}");
}

#[test]
fn ledger_live_returns_to_zero_after_stream() {
    let params = toy_model(8, 8, 2, Structure::Full, 6);
    let mut r = rng(44);
    let x = random_tensor(&[100, 8], &mut r);
    let ledgers = EngineLedgers::new();
    let _ = forward_stream(chunk_iter(&x, 8), &params, 4, Some(&ledgers), false).unwrap();
    assert_eq!(ledgers.local.live_bytes(), 0);
    assert_eq!(ledgers.global.live_bytes(), 0);
    assert!(ledgers.local.peak_bytes() > 0);
}

#[test]
fn chunk_independence_in_local_stage() {
    // Zeroing the tiles of chunk j changes only token row j.
    let params = toy_model(6, 4, 2, Structure::Full, 8);
    let mut r = rng(45);
    let n = 20; // 5 chunks of 4
    let x = random_tensor(&[n, 6], &mut r);

    let tokens_of = |x: &Tensor| -> Vec<Tensor> {
        let out = forward_stream(chunk_iter(x, 4), &params, 1, None, true).unwrap();
        // Recover tokens by re-running local weights? Simpler: stream with
        // b_inf=1 yields logits but not tokens; use local weights instead.
        out.local_weights.unwrap()
    };
    let base = tokens_of(&x);
    let mut zeroed = x.clone();
    for v in &mut zeroed.data_mut()[2 * 4 * 6..3 * 4 * 6] {
        *v = 0.0;
    }
    let changed = tokens_of(&zeroed);
    for k in 0..5 {
        if k == 2 {
            continue;
        }
        assert_eq!(base[k].data(), changed[k].data(), "chunk {k} leaked");
    }
}

#[test]
fn padding_is_sound_and_mask_blocks_garbage() {
    // N=13 with chunk length 8: pad to 16 explicitly, with zeros or with
    // garbage; the mask path must give bit-identical logits.
    let params = toy_model(5, 8, 2, Structure::Full, 9);
    let mut r = rng(46);
    let n = 13;
    let x = random_tensor(&[n, 5], &mut r);
    let reference = train_logits(&params, &x);

    let mut zero_padded = Tensor::zeros(&[16, 5]);
    zero_padded.data_mut()[..n * 5].copy_from_slice(x.data());
    let mut garbage_padded = zero_padded.clone();
    for v in &mut garbage_padded.data_mut()[n * 5..] {
        *v = r.gen_range(-100.0..100.0);
    }

    for padded in [&zero_padded, &garbage_padded] {
        let mut tape = Tape::new(false);
        let vars = params.bind(&mut tape);
        let fwd = forward_train_masked(&mut tape, &vars, padded, n).unwrap();
        let logits = tape.value(fwd.logits).data();
        assert_eq!(logits, reference.as_slice(), "mask path not bit-identical");
    }
}

#[test]
fn empty_bag_is_rejected() {
    let params = toy_model(4, 8, 2, Structure::Full, 10);
    let x = Tensor::zeros(&[0, 4]);
    let mut tape = Tape::new(false);
    let vars = params.bind(&mut tape);
    assert!(forward_train(&mut tape, &vars, &x).is_err());
}

#[test]
fn wrong_chunk_width_is_dimension_error() {
    let params = toy_model(4, 8, 2, Structure::Full, 11);
    let mut r = rng(47);
    let bad = random_tensor(&[8, 3], &mut r);
    let err = forward_stream(std::iter::once(Ok(bad)), &params, 1, None, false);
    assert!(err.is_err());
}

#[test]
fn masked_attention_weights_are_exactly_zero_on_padding() {
    let params = toy_model(4, 8, 2, Structure::Full, 12);
    let mut r = rng(48);
    let n = 10; // chunk 2 has 2 valid of 8
    let x = random_tensor(&[n, 4], &mut r);
    let out = forward_stream(chunk_iter(&x, 8), &params, 2, None, true).unwrap();
    let weights = out.local_weights.unwrap();
    assert_eq!(out.chunk_valid, vec![8, 2]);
    let last = weights[1].data();
    for (i, w) in last.iter().enumerate() {
        if i < 2 {
            assert!(*w > 0.0);
        } else {
            assert_eq!(*w, 0.0, "padded position {i} got weight {w}");
        }
    }
    let sum: f64 = last.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let params = toy_model(6, 8, 3, Structure::Full, 13);
    let mut r = rng(49);
    let x = random_tensor(&[40, 6], &mut r);
    let reference = train_logits(&params, &x);

    let path = dir.path().join("model.slck");
    save_checkpoint(&path, &params, Dtype::F64).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.dims, params.dims);
    assert_eq!(loaded.structure, params.structure);
    let logits = train_logits(&loaded, &x);
    assert_eq!(logits, reference, "f64 checkpoint changed outputs");

    // f32 narrows weights; outputs agree loosely.
    let path32 = dir.path().join("model32.slck");
    save_checkpoint(&path32, &params, Dtype::F32).unwrap();
    let loaded32 = load_checkpoint(&path32).unwrap();
    let logits32 = train_logits(&loaded32, &x);
    for (a, b) in logits32.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn forward_is_deterministic() {
    let params = toy_model(8, 8, 2, Structure::Full, 14);
    let mut r = rng(50);
    let x = random_tensor(&[70, 8], &mut r);
    let a = train_logits(&params, &x);
    let b = train_logits(&params, &x);
    assert_eq!(a, b);
    let s1 = forward_stream(chunk_iter(&x, 8), &params, 4, None, false).unwrap();
    let s2 = forward_stream(chunk_iter(&x, 8), &params, 4, None, false).unwrap();
    assert_eq!(s1.logits.data(), s2.logits.data());
}
