use num_complex::Complex64;
use rand::Rng;

use super::*;
use crate::numerics::{finite_diff_check, FdMode};
use crate::rng::stream;

fn cfg() -> Ha02Config {
    Ha02Config::default()
}

fn tensor<'a, F: Real>(params: &'a Ha02Params<F>, id: &str) -> &'a ParamTensor<F> {
    params.tensors().iter().find(|t| t.id == id).unwrap()
}

#[test]
fn parameter_counts_reconcile() {
    let params: Ha02Params<f32> = Ha02Params::init(&cfg(), 0);
    assert_eq!(params.count(CountFilter::Encoder), 31_824);
    assert_eq!(params.count(CountFilter::Decoder), 73_783);
    assert_eq!(params.count(CountFilter::All), 105_607);
    assert_eq!(params.count(CountFilter::FullyConnected), 105_120);
    let share = 100.0 * 105_120.0 / 105_607.0;
    assert_eq!(format!("{share:.2}"), "99.54");
}

#[test]
fn decoder_per_layer_counts() {
    let params: Ha02Params<f32> = Ha02Params::init(&cfg(), 0);
    let n = |id: &str| tensor(&params, id).numel();
    assert_eq!(n("decoder.conv1.k") + n("decoder.conv1.b"), 10);
    assert_eq!(
        n("decoder.res_a.k") + n("decoder.res_a.b") + n("decoder.res_b.k") + n("decoder.res_b.b"),
        36
    );
    assert_eq!(n("decoder.norm3.scale") + n("decoder.norm3.offset"), 144);
    assert_eq!(n("decoder.w_up") + n("decoder.b_up"), 73_584);
    assert_eq!(n("decoder.conv_out.k") + n("decoder.conv_out.b"), 9);
    // encoder reconciliation: input projection, attention output projection,
    // FFN pair, two norms
    let e = |id: &str| tensor(&params, id).numel();
    assert_eq!(e("encoder.w_in") + e("encoder.b_in"), 15_768);
    assert_eq!(e("encoder.w_attn_out") + e("encoder.b_attn_out"), 5_256);
    assert_eq!(
        e("encoder.w_ff1") + e("encoder.b_ff1") + e("encoder.w_ff2") + e("encoder.b_ff2"),
        10_512
    );
}

#[test]
fn pack_layout_and_round_trip() {
    let mut values = vec![Complex64::new(0.0, 0.0); 72];
    values[0] = Complex64::new(3.0, 4.0);
    values[40] = Complex64::new(-1.5, 0.25);
    let p = crate::estimators::PilotEstimate::new(values, 36);
    let packed: Vec<f64> = pack_input(&p);
    assert_eq!(packed.len(), 144);
    assert_eq!(&packed[0..2], &[3.0, 4.0]);
    // row 40 lives in the second pilot block
    assert_eq!(&packed[80..82], &[-1.5, 0.25]);
    let back = unpack_input::<f64>(&packed, 36);
    assert_eq!(back.values(), p.values());

    // all-real input leaves the imaginary column zero
    let real_only =
        crate::estimators::PilotEstimate::new(vec![Complex64::new(0.7, 0.0); 72], 36);
    let packed: Vec<f64> = pack_input(&real_only);
    for r in 0..72 {
        assert_eq!(packed[2 * r + 1], 0.0);
    }
}

#[test]
fn encoder_shapes_and_attention_rows() {
    let params: Ha02Params<f64> = Ha02Params::init(&cfg(), 1);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut rng = stream(70, 0);
    let x = g.constant(
        &[72, 2],
        (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let (e, trace) = forward_traced(&mut g, &bound, x, &cfg()).unwrap();
    assert_eq!(g.shape(e), &[1008, 2]);
    for attn in &trace.attention {
        assert_eq!(g.shape(*attn), &[36, 36]);
        for row in 0..36 {
            let sum: f64 = g.values(*attn)[row * 36..(row + 1) * 36].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_input_gives_uniform_attention_and_zero_output_at_init() {
    // at init all biases and norm offsets are zero, so a zero input stays
    // zero through every stage
    let params: Ha02Params<f64> = Ha02Params::init(&cfg(), 2);
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(&[72, 2], vec![0.0; 144]);
    let (out, trace) = forward_traced(&mut g, &bound, x, &cfg()).unwrap();
    for attn in &trace.attention {
        for v in g.values(*attn) {
            assert!((v - 1.0 / 36.0).abs() < 1e-15);
        }
    }
    for v in g.values(out) {
        assert_eq!(*v, 0.0);
    }
}

/// Golden regression: zero input through a model whose biases and offsets
/// are filled with a fixed pseudo-random pattern. The expected bits were
/// produced by this implementation once and pin the full forward chain.
#[test]
fn zero_input_bias_chain_regression() {
    let mut params: Ha02Params<f64> = Ha02Params::init(&cfg(), 3);
    let mut rng = stream(71, 0);
    for t in params.tensors_mut() {
        if t.id.contains(".b") || t.id.contains("offset") {
            for v in t.values.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(&[72, 2], vec![0.0; 144]);
    let out = forward(&mut g, &bound, x, &cfg()).unwrap();
    let got: Vec<u64> = g.values(out)[..4].iter().map(|v| v.to_bits()).collect();
    let expected = [
        GOLDEN_0, GOLDEN_1, GOLDEN_2, GOLDEN_3,
    ];
    assert_eq!(got, expected, "values {:?}", &g.values(out)[..4]);
}

// first four output values: 2.217257361609607, 1.3739027092485707,
// -0.11194327771327005, 0.24754994309729142
const GOLDEN_0: u64 = 4612175238513782166;
const GOLDEN_1: u64 = 4608866326902062090;
const GOLDEN_2: u64 = 13816102820778678575;
const GOLDEN_3: u64 = 4598086946942443817;

#[test]
fn forward_is_deterministic() {
    let params: Ha02Params<f32> = Ha02Params::init(&cfg(), 4);
    let mut rng = stream(72, 0);
    let input: Vec<f32> = (0..144).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let run = || {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(&[72, 2], input.clone());
        let out = forward(&mut g, &bound, x, &cfg()).unwrap();
        g.values(out).iter().map(|v| v.to_bits()).collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn infer_produces_full_grid() {
    let params: Ha02Params<f32> = Ha02Params::init(&cfg(), 5);
    let mut rng = stream(73, 0);
    let pilots: Vec<Complex64> = (0..72)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let p = crate::estimators::PilotEstimate::new(pilots, 36);
    let frame = crate::ofdm::FrameConfig::default();
    let grid = infer(&params, &p, &frame).unwrap();
    assert_eq!(grid.n_subcarriers(), 72);
    assert_eq!(grid.n_symbols(), 14);
    assert!(grid.data().iter().all(|v| v.re.is_finite() && v.im.is_finite()));
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let params: Ha02Params<f64> = Ha02Params::init(&cfg(), 6);
    let mut rng = stream(74, 0);
    let input: Vec<f64> = (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label: Vec<f64> = (0..2016).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |values: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut work = params.clone();
        for (t, v) in work.tensors_mut().iter_mut().zip(values) {
            t.values.copy_from_slice(v);
        }
        let mut g = Graph::new();
        let bound = work.bind(&mut g);
        let x = g.constant(&[72, 2], input.clone());
        let out = forward(&mut g, &bound, x, &cfg()).unwrap();
        let loss = g.huber_mean(out, &label, 1.0).unwrap();
        g.backward(loss).unwrap();
        let grads = bound
            .ids()
            .iter()
            .map(|&id| g.grad(id).unwrap().to_vec())
            .collect();
        (g.values(loss)[0], grads)
    };
    let base: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.values.clone()).collect();
    let (_, analytic) = run(&base);
    let report = finite_diff_check(
        &base,
        &analytic,
        |p| run(p).0,
        1e-4,
        FdMode::Directional {
            probes: 64,
            seed: 75,
        },
    );
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn init_is_seeded_and_sane() {
    let a: Ha02Params<f32> = Ha02Params::init(&cfg(), 7);
    let b: Ha02Params<f32> = Ha02Params::init(&cfg(), 7);
    for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
        assert_eq!(ta.values, tb.values);
    }
    let c: Ha02Params<f32> = Ha02Params::init(&cfg(), 8);
    assert_ne!(
        tensor(&a, "encoder.w_in").values,
        tensor(&c, "encoder.w_in").values
    );
    assert!(tensor(&a, "encoder.norm1.scale").values.iter().all(|&v| v == 1.0));
    assert!(tensor(&a, "encoder.b_in").values.iter().all(|&v| v == 0.0));

    // forward output variance stays sane on unit-variance input
    let params: Ha02Params<f64> = a.convert();
    let mut acc = 0.0;
    let mut count = 0;
    for trial in 0..4 {
        let mut rng = stream(76, trial);
        let input: Vec<f64> = (0..144)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(&[72, 2], input);
        let out = forward(&mut g, &bound, x, &cfg()).unwrap();
        acc += g.values(out).iter().map(|v| v * v).sum::<f64>();
        count += g.values(out).len();
    }
    let var = acc / count as f64;
    assert!((0.1..=10.0).contains(&var), "output variance {var}");
}

#[test]
fn residual_block_skip_is_exact() {
    let mut params: Ha02Params<f64> = Ha02Params::init(&cfg(), 9);
    for t in params.tensors_mut() {
        if t.id.starts_with("decoder.res_") {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut rng = stream(77, 0);
    let x = g.constant(
        &[72, 2],
        (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let (_, trace) = forward_traced(&mut g, &bound, x, &cfg()).unwrap();
    assert_eq!(
        g.values(trace.res_block_sum),
        g.values(trace.res_block_input)
    );
}

#[test]
fn encoder_skip_uses_module_input() {
    let mut params: Ha02Params<f64> = Ha02Params::init(&cfg(), 10);
    for t in params.tensors_mut() {
        if t.id == "encoder.w_attn_out" || t.id == "encoder.b_attn_out" {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let mut rng = stream(78, 0);
    let input: Vec<f64> = (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = g.constant(&[72, 2], input.clone());
    let (_, trace) = forward_traced(&mut g, &bound, x, &cfg()).unwrap();
    assert_eq!(g.values(trace.encoder_skip_sum), input.as_slice());
}

#[test]
fn no_dead_parameters_at_init() {
    let params: Ha02Params<f64> = Ha02Params::init(&cfg(), 11);
    let mut rng = stream(79, 0);
    let input: Vec<f64> = (0..144).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label: Vec<f64> = (0..2016).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let x = g.constant(&[72, 2], input);
    let out = forward(&mut g, &bound, x, &cfg()).unwrap();
    let loss = g.huber_mean(out, &label, 1.0).unwrap();
    g.backward(loss).unwrap();
    for (t, &id) in params.tensors().iter().zip(bound.ids()) {
        let max = g
            .grad(id)
            .unwrap()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max > 0.0, "parameter {} received no gradient", t.id);
    }
}

#[test]
fn weight_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ha02w");
    let params: Ha02Params<f32> = Ha02Params::init(&cfg(), 12);
    save_params(&path, &params).unwrap();
    let loaded = load_params(&path).unwrap();
    for (a, b) in params.tensors().iter().zip(loaded.tensors()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.component, b.component);
        assert_eq!(a.shape, b.shape);
        assert_eq!(a.values, b.values);
        assert_eq!(a.fully_connected, b.fully_connected);
    }
    // writing twice is byte-identical
    let path2 = dir.path().join("model2.ha02w");
    save_params(&path2, &params).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn weight_file_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ha02w");
    let params: Ha02Params<f32> = Ha02Params::init(&cfg(), 13);
    save_params(&path, &params).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    // bad magic
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(
        read_params_from(&mut bad.as_slice()),
        Err(WeightFileError::BadMagic)
    ));

    // truncated data section
    let mut short = bytes.clone();
    short.truncate(bytes.len() - 8);
    assert!(matches!(
        read_params_from(&mut short.as_slice()),
        Err(WeightFileError::Io(_))
    ));

    // corrupt a manifest dimension: the first tensor id is "encoder.w_in",
    // its first dim starts right after magic+version+count+idlen+id+flags
    let dim_pos = 8 + 4 + 4 + 2 + "encoder.w_in".len() + 3;
    let mut wrong = bytes.clone();
    wrong[dim_pos] = wrong[dim_pos].wrapping_add(1);
    assert!(matches!(
        read_params_from(&mut wrong.as_slice()),
        Err(WeightFileError::Layout(_))
    ));
}
