use hero_tensor::{
    kl_divergence, load_checkpoint, save_checkpoint, Adam, AdamConfig, ParamStore, Tape, Tensor,
    LOG_CLAMP,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(xs in prop::collection::vec(-30.0f64..30.0, 12), shift in -100.0f64..100.0) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3, 4], xs.clone()).unwrap());
        let s = t.softmax(x, 1).unwrap();
        for row in t.value(s).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        let shifted = t.add_scalar(x, shift);
        let s2 = t.softmax(shifted, 1).unwrap();
        for (a, b) in t.value(s).iter().zip(t.value(s2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_open_interval_monotone_and_antisymmetric(mut xs in prop::collection::vec(-60.0f64..60.0, 16)) {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(xs.clone()));
        let y = t.sigmoid(x);
        let neg = t.scale(x, -1.0);
        let yn = t.sigmoid(neg);
        let (yv, ynv) = (t.value(y), t.value(yn));
        prop_assert!(yv.iter().all(|&p| p > 0.0 && p < 1.0));
        prop_assert!(yv.windows(2).all(|w| w[0] <= w[1]));
        for (a, b) in yv.iter().zip(ynv) {
            prop_assert!((a - (1.0 - b)).abs() < 1e-15);
        }
    }
}

#[test]
fn kl_is_nonnegative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.gen_range(2..8);
        let mut draw = || {
            let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = v.iter().sum();
            Tensor::vector(v.into_iter().map(|x| x / s).collect())
        };
        let (p, q) = (draw(), draw());
        let mut t = Tape::new();
        let (pv, qv) = (t.constant(p), t.constant(q));
        let k = kl_divergence(&mut t, pv, qv, LOG_CLAMP).unwrap();
        assert!(t.scalar(k) >= -1e-15);
    }
}

fn train_a_bit(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = store.add(
        "w",
        Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
    );
    let x = Tensor::new(vec![5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut adam = Adam::new(AdamConfig::new(0.01, 3), &store);
    let mut last_grad = vec![];
    for _ in 0..3 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(&store, w);
        let y = t.matmul(xv, wv).unwrap();
        let s = t.softmax(y, 1).unwrap();
        let l = t.ln(s);
        let loss = t.mean(l);
        t.backward(loss).unwrap();
        last_grad = t.grad(wv).unwrap().to_vec();
        store.accumulate(&t);
        adam.step(&mut store).unwrap();
    }
    (store.value(w).data().to_vec(), last_grad)
}

#[test]
fn identical_seed_and_ops_are_bitwise_identical() {
    let (a, ga) = train_a_bit(5);
    let (b, gb) = train_a_bit(5);
    assert_eq!(
        a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        ga.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        gb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn post_clip_norm_never_exceeds_ceiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let mut store = ParamStore::new();
        for i in 0..3 {
            let id = store.add(format!("p{i}"), Tensor::zeros(&[4]));
            let g = (0..4).map(|_| rng.gen_range(-10.0..10.0)).collect();
            store.get_mut(id).grad = Some(g);
        }
        hero_tensor::clip_grad_norm(&mut store, 1.0);
        assert!(store.grad_norm() <= 1.0 + 1e-9);
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    store.add(
        "enc.w",
        Tensor::new(vec![3, 5], (0..15).map(|_| rng.gen::<f64>() * 1e-3 - 7.0).collect()).unwrap(),
    );
    store.add_frozen("table", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
    let path = dir.path().join("ckpt.json");
    let meta = serde_json::json!({"taps": 4});
    save_checkpoint(&store, meta.clone(), &path).unwrap();
    let (loaded, m) = load_checkpoint(&path).unwrap();
    assert_eq!(m, meta);
    assert_eq!(loaded.len(), 2);
    for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert_eq!(a.value.shape(), b.value.shape());
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(manifest["entries"][0]["dtype"], "f64");
    assert_eq!(manifest["entries"][1]["offset"], 15 * 8);
    assert_eq!(manifest["entries"][1]["length"], 3 * 8);
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    store.add("w", Tensor::zeros(&[4]));
    let path = dir.path().join("c.json");
    save_checkpoint(&store, serde_json::Value::Null, &path).unwrap();
    std::fs::write(dir.path().join("c.bin"), [0u8; 10]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
