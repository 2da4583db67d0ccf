use ailora::adapter::{
    adapted_forward, adapters_from_store, adapters_to_store, init_adapters, merge, trainable_parameter_count, AdapterConfig,
    AdapterScheme, Projection, Ranks,
};
use ailora::factorization::{reconstruct, split_minor, split_principal};
use ailora::model::{ModelConfig, ToyModel};
use ailora::{Matrix, TensorStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCHEMES: [AdapterScheme; 4] = [AdapterScheme::LoraStandard, AdapterScheme::Pissa, AdapterScheme::Milora, AdapterScheme::Ailora];

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn toy_weights() -> TensorStore {
    ToyModel::init(&ModelConfig::default()).unwrap().to_store().unwrap()
}

fn cfg(scheme: AdapterScheme, ranks: &str) -> AdapterConfig {
    AdapterConfig::new(scheme, ranks.parse().unwrap(), 16.0, 11)
}

#[test]
fn zero_deviation_for_every_scheme() {
    let weights = toy_weights();
    for scheme in SCHEMES {
        let layers = init_adapters(&weights, &cfg(scheme, "q=8,k=4,v=8,o=2")).unwrap();
        assert_eq!(layers.len(), 2);
        for (i, layer) in layers.iter().enumerate() {
            assert_eq!(layer.len(), 4);
            for (p, ad) in layer {
                let w = weights.require(&p.weight_name(i)).unwrap();
                let dev = ad.effective_weight().sub(w).unwrap().frobenius_norm() / w.frobenius_norm();
                assert!(dev < 1e-10, "{scheme:?} layer{i}.{p}: {dev:e}");
                assert_eq!(merge(ad), ad.effective_weight());
            }
        }
    }
}

#[test]
fn lora_is_exact_at_init() {
    let weights = toy_weights();
    let layers = init_adapters(&weights, &cfg(AdapterScheme::LoraStandard, "q=8,v=8")).unwrap();
    let q = &layers[0][&Projection::Q];
    assert_eq!(q.b.max_abs(), 0.0);
    assert_eq!(merge(q), *weights.require("layer0.q").unwrap());
    assert_eq!(q.scale, 2.0);
    assert!(q.a.max_abs() > 0.0);
}

#[test]
fn ailora_on_diagonal_query() {
    let mut w = TensorStore::new();
    w.insert("layer0.q", Matrix::diag(&[3.0, 2.0, 1.0]).unwrap()).unwrap();
    w.insert("layer0.v", Matrix::diag(&[3.0, 2.0, 1.0]).unwrap()).unwrap();
    let layers = init_adapters(&w, &cfg(AdapterScheme::Ailora, "q=1,v=1")).unwrap();
    let q = &layers[0][&Projection::Q];
    assert!(q.b.matmul(&q.a).unwrap().max_abs_diff(&Matrix::diag(&[3.0, 0.0, 0.0]).unwrap()).unwrap() < 1e-15);
    assert_eq!(q.base, Matrix::diag(&[0.0, 2.0, 1.0]).unwrap());
    let v = &layers[0][&Projection::V];
    assert_eq!(v.b.matmul(&v.a).unwrap(), Matrix::diag(&[0.0, 0.0, 1.0]).unwrap());
    assert_eq!(q.scale, 1.0);
}

#[test]
fn ailora_random_16x16_matches_reconstruct_oracle() {
    let (wq, wv) = (random(16, 16, 1), random(16, 16, 2));
    let mut w = TensorStore::new();
    w.insert("layer0.q", wq.clone()).unwrap();
    w.insert("layer0.v", wv.clone()).unwrap();
    let layers = init_adapters(&w, &cfg(AdapterScheme::Ailora, "q=4,v=4")).unwrap();
    let oracle_q = reconstruct(&split_principal(&wq, 4).unwrap());
    let oracle_v = reconstruct(&split_minor(&wv, 4).unwrap());
    for (p, orig, oracle) in [(Projection::Q, &wq, &oracle_q), (Projection::V, &wv, &oracle_v)] {
        let eff = layers[0][&p].effective_weight();
        assert!(eff.sub(orig).unwrap().frobenius_norm() / orig.frobenius_norm() < 1e-10);
        assert!(eff.relative_distance(oracle).unwrap() < 1e-12);
    }
}

#[test]
fn scheme_equivalences_are_bitwise() {
    let weights = toy_weights();
    let ranks = "q=8,v=8";
    let ai = init_adapters(&weights, &cfg(AdapterScheme::Ailora, ranks)).unwrap();
    let pi = init_adapters(&weights, &cfg(AdapterScheme::Pissa, ranks)).unwrap();
    let mi = init_adapters(&weights, &cfg(AdapterScheme::Milora, ranks)).unwrap();
    for i in 0..ai.len() {
        assert_eq!(ai[i][&Projection::Q], pi[i][&Projection::Q]);
        assert_eq!(ai[i][&Projection::V], mi[i][&Projection::V]);
        assert_ne!(ai[i][&Projection::Q], mi[i][&Projection::Q]);
    }
    // K and O fall back to the Gaussian rule under AILoRA.
    let ai = init_adapters(&weights, &cfg(AdapterScheme::Ailora, "k=4,o=4")).unwrap();
    let lo = init_adapters(&weights, &cfg(AdapterScheme::LoraStandard, "k=4,o=4")).unwrap();
    assert_eq!(ai, lo);
}

#[test]
fn adapted_forward_matches_merge_oracle() {
    let weights = toy_weights();
    for scheme in SCHEMES {
        let mut layers = init_adapters(&weights, &cfg(scheme, "q=4,v=4")).unwrap();
        let ad = layers[1].get_mut(&Projection::V).unwrap();
        ad.b = random(ad.b.rows(), ad.b.cols(), 9);
        let x = random(7, 64, 10);
        let merged = merge(ad);
        // x·Wᵀ by explicit sums
        let oracle = Matrix::from_fn(7, 64, |i, j| (0..64).map(|k| x.get(i, k) * merged.get(j, k)).sum()).unwrap();
        assert!(adapted_forward(ad, &x).unwrap().max_abs_diff(&oracle).unwrap() < 1e-12);
        let probe = adapted_forward(ad, &Matrix::identity(64)).unwrap();
        assert!(probe.max_abs_diff(&merged.transpose()).unwrap() < 1e-12);
        assert!(adapted_forward(ad, &Matrix::zeros(2, 5)).is_err());

        ad.b = Matrix::zeros(ad.b.rows(), ad.b.cols());
        assert_eq!(merge(ad), ad.base);
        assert_eq!(adapted_forward(ad, &x).unwrap(), x.matmul_t(&ad.base).unwrap());
    }
}

#[test]
fn rank_exceeding_dimension_is_rejected() {
    let mut w = TensorStore::new();
    w.insert("layer0.q", random(4, 3, 0)).unwrap();
    assert!(init_adapters(&w, &cfg(AdapterScheme::Pissa, "q=4")).is_err());
    assert!(init_adapters(&w, &cfg(AdapterScheme::Pissa, "v=1")).is_err());
    assert!(init_adapters(&w, &cfg(AdapterScheme::Pissa, "q=0")).is_err());
}

#[test]
fn adapter_store_round_trip() {
    let weights = toy_weights();
    let c = cfg(AdapterScheme::Ailora, "q=8,k=2,v=8");
    let layers = init_adapters(&weights, &c).unwrap();
    let store = adapters_to_store(&layers, &c).unwrap();
    assert_eq!(store.meta("scheme"), Some("ailora"));
    assert_eq!(store.meta("ranks"), Some("q=8,k=2,v=8,o=0"));
    assert!(store.contains("layer1.k.base"));
    let bytes = store.to_bytes().unwrap();
    let (back, back_cfg) = adapters_from_store(&TensorStore::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, layers);
    assert_eq!(back_cfg, c);
}

fn square_1024(_: Projection) -> (usize, usize) {
    (1024, 1024)
}

#[test]
fn budget_matches_reported_size() {
    let c = cfg(AdapterScheme::Ailora, "q=8,v=8");
    assert_eq!(trainable_parameter_count(&c, 24, square_1024).unwrap(), 786_432);
    let single = cfg(AdapterScheme::Ailora, "q=16");
    assert_eq!(trainable_parameter_count(&single, 24, square_1024).unwrap(), 786_432);
    assert!(trainable_parameter_count(&cfg(AdapterScheme::Ailora, "q=0"), 24, square_1024).is_err());
}

#[test]
fn rank_grid_rows_share_one_budget() {
    let grid = ["q=8,v=8", "q=16", "k=16", "v=16", "o=16", "q=8,k=8", "k=8,v=8", "q=4,k=4,v=4,o=4"];
    let counts: Vec<usize> = grid
        .iter()
        .map(|r| trainable_parameter_count(&cfg(AdapterScheme::Ailora, r), 24, square_1024).unwrap())
        .collect();
    assert!(counts.iter().all(|&c| c == 786_432), "{counts:?}");
    assert_eq!("q=4,k=4,v=4,o=4".parse::<Ranks>().unwrap(), Ranks::uniform(&Projection::ALL, 4));
}
