use bcg_tensor::gradcheck::check_inputs;
use bcg_tensor::{Checkpoint, ParamStore, Result, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Contracts an arbitrary output with a fixed pseudo-random weight so the
/// upstream gradient is not all ones.
fn project(t: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let w = t.constant(Tensor::from_f64(&shape, &w).unwrap());
    let p = t.mul(out, w)?;
    t.sum_all(p)
}

fn assert_gradcheck<G>(name: &str, inputs: Vec<Tensor<f64>>, f: G)
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let errs = check_inputs(&inputs, H, |t, v| {
        let o = f(t, v)?;
        project(t, o)
    })
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{name}: input {i} relative error {e:e}");
    }
}

fn shapes3() -> [Vec<usize>; 3] {
    [vec![3, 4], vec![2, 3, 5], vec![4, 2, 2, 3]]
}

#[test]
fn elementwise_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in shapes3() {
        let suffix = s[s.len() - 1..].to_vec();
        let a = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &suffix, -1.0, 1.0);
        let full = rand_tensor(&mut rng, &s, -1.0, 1.0);
        assert_gradcheck("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        assert_gradcheck("sub", vec![a.clone(), full.clone()], |t, v| t.sub(v[0], v[1]));
        assert_gradcheck("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        assert_gradcheck("mul_full", vec![a.clone(), full.clone()], |t, v| t.mul(v[0], v[1]));
        assert_gradcheck("scale", vec![a.clone()], |t, v| t.scale(v[0], -2.5));
        assert_gradcheck("add_scalar", vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3));
        assert_gradcheck("exp", vec![a.clone()], |t, v| t.exp(v[0]));
        assert_gradcheck("gelu", vec![a.clone()], |t, v| t.gelu(v[0]));
        let pos = rand_tensor(&mut rng, &s, 0.5, 2.0);
        assert_gradcheck("log", vec![pos.clone()], |t, v| t.log(v[0]));
        assert_gradcheck("sqrt", vec![pos], |t, v| t.sqrt(v[0]));
        // Keep values away from the kink.
        let away: Vec<f64> = a.data().iter().map(|&x| if x.abs() < 0.05 { x + 0.2 } else { x }).collect();
        let away = Tensor::from_f64(&s, &away).unwrap();
        assert_gradcheck("clamp_min", vec![away], |t, v| t.clamp_min(v[0], 0.0));
    }
}

#[test]
fn shape_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for s in shapes3() {
        let a = rand_tensor(&mut rng, &s, -1.0, 1.0);
        let n = a.numel();
        assert_gradcheck("transpose", vec![a.clone()], |t, v| t.transpose(v[0]));
        assert_gradcheck("reshape", vec![a.clone()], move |t, v| t.reshape(v[0], &[n]));
        let last = s.len() - 1;
        assert_gradcheck("slice", vec![a.clone()], move |t, v| t.slice(v[0], last, 1, 2));
        assert_gradcheck("slice0", vec![a.clone()], |t, v| t.slice(v[0], 0, 1, 1));
        assert_gradcheck("gather_rows", vec![a.clone()], |t, v| t.gather_rows(v[0], &[1, 0, 1]));
        for axis in 0..s.len() {
            assert_gradcheck("sum", vec![a.clone()], move |t, v| t.sum(v[0], axis));
            assert_gradcheck("mean", vec![a.clone()], move |t, v| t.mean(v[0], axis));
        }
    }
}

#[test]
fn matmul_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // The 5x4 . 4x3 case plus shared-rhs batched and fully batched forms.
    let cases = [
        (vec![5, 4], vec![4, 3]),
        (vec![2, 3, 4], vec![4, 2]),
        (vec![3, 2, 4], vec![3, 4, 5]),
    ];
    for (sa, sb) in cases {
        let a = rand_tensor(&mut rng, &sa, -1.0, 1.0);
        let b = rand_tensor(&mut rng, &sb, -1.0, 1.0);
        assert_gradcheck("matmul", vec![a, b], |t, v| t.matmul(v[0], v[1]));
    }
}

#[test]
fn normalizations_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for s in shapes3() {
        let d = *s.last().unwrap();
        let x = rand_tensor(&mut rng, &s, -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[d], 0.5, 1.5);
        let b = rand_tensor(&mut rng, &[d], -0.5, 0.5);
        assert_gradcheck("layer_norm", vec![x.clone(), g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
        assert_gradcheck("l2_normalize", vec![x.clone()], |t, v| t.l2_normalize(v[0], 1e-12));
        for axis in 0..s.len() {
            assert_gradcheck("softmax", vec![x.clone()], move |t, v| t.softmax(v[0], axis));
            assert_gradcheck("log_softmax", vec![x.clone()], move |t, v| t.log_softmax(v[0], axis));
        }
    }
}

#[test]
fn token_ops_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (b, tok, d) in [(1, 4, 2), (2, 5, 3), (3, 6, 4)] {
        let x = rand_tensor(&mut rng, &[b, tok, d], -1.0, 1.0);
        let idx: Vec<Vec<usize>> = (0..b).map(|i| vec![(i + 1) % tok, (i + 3) % tok]).collect();
        let idx2 = idx.clone();
        assert_gradcheck("take_tokens", vec![x.clone()], move |t, v| t.take_tokens(v[0], &idx));
        let kept = rand_tensor(&mut rng, &[b, 2, d], -1.0, 1.0);
        let fill = rand_tensor(&mut rng, &[d], 0.0, 1.0);
        assert_gradcheck("scatter_tokens", vec![kept, fill], move |t, v| t.scatter_tokens(v[0], v[1], &idx2, tok));
        assert_gradcheck("mean_pool", vec![x], |t, v| t.mean_pool(v[0]));
    }
}

#[test]
fn attention_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (b, tok, d, heads) in [(1, 3, 4, 1), (2, 4, 6, 2), (2, 5, 8, 4)] {
        let q = rand_tensor(&mut rng, &[b, tok, d], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[b, tok, d], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[b, tok, d], -1.0, 1.0);
        assert_gradcheck("attention", vec![q, k, v], move |t, x| t.attention(x[0], x[1], x[2], heads));
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[3]));
    let y = t.softmax(x, 0).unwrap();
    for &p in t.data(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(&[2, 5], 3.25));
    let g = t.constant(Tensor::full(&[5], 1.0));
    let b = t.constant(Tensor::zeros(&[5]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(t.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn quadratic_form_gradient_by_hand() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum_all(sq).unwrap();
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn unused_parameter_gets_zero_gradient_and_reuse_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add("used", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
    let unused = store.add("unused", Tensor::from_f64(&[3], &[5.0; 3]).unwrap());
    let mut t = Tape::new();
    let a = t.param(&store, used);
    let b = t.param(&store, used);
    let p = t.mul(a, b).unwrap();
    let s = t.add(p, a).unwrap();
    let loss = t.sum_all(s).unwrap();
    t.backward(loss).unwrap().accumulate_into(&mut store);
    // d/dp (p*p + p) = 2p + 1
    assert_eq!(store.grad(used), &[3.0, -1.0]);
    assert_eq!(store.grad(unused), &[0.0; 3]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 2]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    let err = t.add(a, b).unwrap_err().to_string();
    assert!(err.starts_with("add"), "{err}");
}

#[test]
fn finite_check_flags_nan() {
    let mut t = Tape::<f32>::new();
    t.set_check_finite(true);
    let x = t.constant(Tensor::from_f64(&[2], &[-1.0, 4.0]).unwrap());
    assert!(matches!(t.sqrt(x), Err(TensorError::NonFinite { op: "sqrt" })));
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[2], &[-1.0, 4.0]).unwrap());
    assert!(t.sqrt(x).is_ok());
}

fn attention_grads(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::<f32>::new();
    let mk = |rng: &mut ChaCha8Rng| {
        let d: Vec<f32> = (0..4 * 16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![4, 16, 8], d).unwrap()
    };
    let q = t.leaf(mk(&mut rng));
    let k = t.leaf(mk(&mut rng));
    let v = t.leaf(mk(&mut rng));
    let o = t.attention(q, k, v, 2).unwrap();
    let o = t.gelu(o).unwrap();
    let l = t.mean_all(o).unwrap();
    let g = t.backward(l).unwrap();
    [q, k, v].iter().flat_map(|&x| g.get(x).unwrap().to_vec()).collect()
}

#[test]
fn backward_is_bitwise_deterministic() {
    let a = attention_grads(9);
    let b = attention_grads(9);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    bcg_tensor::set_deterministic(true);
    let c = attention_grads(9);
    bcg_tensor::set_deterministic(false);
    assert!(a.iter().zip(&c).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn param_store_checkpoint_round_trip() {
    let mut store = ParamStore::<f32>::new();
    store.add("tokenizer.w", Tensor::full(&[3, 2], 0.5));
    store.add("tokenizer.b", Tensor::full(&[2], -1.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bsdk");
    store.to_checkpoint().save(&path).unwrap();
    let mut other = ParamStore::<f32>::new();
    other.add("tokenizer.w", Tensor::zeros(&[3, 2]));
    other.add("tokenizer.b", Tensor::zeros(&[2]));
    other.load_all(&Checkpoint::load(&path).unwrap(), "").unwrap();
    assert_eq!(store.checksum(), other.checksum());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-80.0f32..80.0, 1..40)) {
        let n = v.len();
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![n], v).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let s: f64 = t.data(y).iter().map(|&p| p as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_gives_unit_rows(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let n = v.len();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![n], v).unwrap());
        let y = t.l2_normalize(x, 1e-12).unwrap();
        let s: f64 = t.data(y).iter().map(|p| p * p).sum::<f64>().sqrt();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        dims in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
        wide in any::<bool>(),
    ) {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
        let mut ck = Checkpoint::default();
        let data = if wide {
            bcg_tensor::TensorData::F64(vals)
        } else {
            bcg_tensor::TensorData::F32(vals.iter().map(|&x| x as f32).collect())
        };
        ck.push(bcg_tensor::NamedTensor { name: "blk.ü".into(), shape: dims, data });
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }
}
