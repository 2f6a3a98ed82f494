mod common;

use common::*;
use imss_core::autograd::{Graph, Var};
use imss_core::config::{ModelConfig, PrototypeNorm};
use imss_core::encoder::FeaturePyramid;
use imss_core::mas::{self, Mode};
use imss_core::params::ParamStore;
use imss_core::sgf::{self, build_prototypes, filter_class, fuse_scale, project_semantic, robustness_perceptron, spatial_perceptron};
use imss_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store_for(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    sgf::init_params(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(seed));
    randomize(&mut s, &mut rng(seed + 1000), 0.5);
    s
}

fn leaves(g: &mut Graph<f64>, ts: &[Tensor<f64>]) -> Vec<Var> {
    ts.iter().map(|t| g.leaf(t.clone())).collect()
}

/// Random pyramid with scale sizes 8, 4, 2, 1.
fn pyramid(g: &mut Graph<f64>, cfg: &ModelConfig, ids: &[&str], b: usize, seed: u64) -> (FeaturePyramid, Vec<Vec<Tensor<f64>>>) {
    let mut r = rng(seed);
    let mut feats = Vec::new();
    let mut raw = Vec::new();
    for _ in ids {
        let ts: Vec<Tensor<f64>> = (0..4)
            .map(|s| rand_tensor(&mut r, &[b, 8 >> s, 8 >> s, cfg.stage_channels()[s]], 1.0))
            .collect();
        let v = leaves(g, &ts);
        feats.push([v[0], v[1], v[2], v[3]]);
        raw.push(ts);
    }
    (
        FeaturePyramid {
            modalities: ids.iter().map(|s| s.to_string()).collect(),
            features: feats,
        },
        raw,
    )
}

#[test]
fn semantic_projector_matches_loops() {
    let cfg = oracle_config(2, 5, 16);
    let store = store_for(&cfg, 1);
    let x = rand_tensor(&mut rng(2), &[1, 8, 8, 16], 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = project_semantic(&mut g, &p, &cfg, xv, "m1", 1).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 8, 16]);

    let mut h = x.data().to_vec();
    for (j, &k) in cfg.mp_kernels.iter().enumerate() {
        h = depthwise(&h, 8, 8, 16, k, param(&store, &format!("sgf.s2.mp.m1.dw{j}.w")), param(&store, &format!("sgf.s2.mp.m1.dw{j}.b")));
    }
    let expect: Vec<f64> = (0..64)
        .flat_map(|px| affine(&row(&h, px, 16), param(&store, "sgf.s2.mp.m1.pw.w"), param(&store, "sgf.s2.mp.m1.pw.b")))
        .collect();
    assert!(max_abs_diff(g.value(y).data(), &expect) < 1e-6);
}

#[test]
fn semantic_projector_is_linear_and_checks_modality() {
    let cfg = oracle_config(2, 5, 16);
    let mut store = ParamStore::<f64>::new();
    sgf::init_params(&cfg, &mut store, &mut rng(0));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.leaf(Tensor::zeros(&[1, 8, 8, 16]));
    let y = project_semantic(&mut g, &p, &cfg, x, "m0", 0).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert!(matches!(project_semantic(&mut g, &p, &cfg, x, "lidar", 0), Err(Error::Subset(_))));
}

#[test]
fn class_filter_selector_and_oracle() {
    let cfg = oracle_config(2, 5, 16);
    let mut store = store_for(&cfg, 3);
    let x = rand_tensor(&mut rng(4), &[1, 4, 4, 16], 1.0);

    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = filter_class(&mut g, &p, xv, 0);
    let y2 = filter_class(&mut g, &p, xv, 0);
    assert_eq!(g.value(y), g.value(y2));
    let expect: Vec<f64> = (0..16)
        .flat_map(|px| affine(&row(x.data(), px, 16), param(&store, "sgf.s1.csf.w"), param(&store, "sgf.s1.csf.b")))
        .collect();
    assert!(max_abs_diff(g.value(y).data(), &expect) < 1e-6);

    // Selector weights: class k reads channel 3k.
    let sel = Tensor::from_fn(&[16, 5], |i| if i / 5 == 3 * (i % 5) { 1.0 } else { 0.0 });
    *store.get_mut("sgf.s1.csf.w").unwrap() = sel;
    *store.get_mut("sgf.s1.csf.b").unwrap() = Tensor::zeros(&[5]);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xv = g.leaf(x.clone());
    let y = filter_class(&mut g, &p, xv, 0);
    for px in 0..16 {
        for k in 0..5 {
            assert_eq!(g.value(y).data()[px * 5 + k], x.data()[px * 16 + 3 * k]);
        }
    }
}

#[test]
fn prototypes_hand_cases() {
    let mut g = Graph::<f64>::new();
    let v = [1.0, -2.0, 0.5];
    let c = g.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap());
    let f = g.leaf(Tensor::from_vec(&[1, 1, 1, 3], v.to_vec()).unwrap());
    let p = build_prototypes(&mut g, &[c], &[f], PrototypeNorm::Off).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, -2.0, 0.5, 0.0, 0.0, 0.0]);

    let c = g.leaf(Tensor::from_vec(&[1, 1, 2, 1], vec![0.5, 0.5]).unwrap());
    let f = g.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap());
    let p = build_prototypes(&mut g, &[c], &[f], PrototypeNorm::Off).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 3.5]);

    let c = g.leaf(Tensor::zeros(&[1, 2, 2, 4]));
    let f = g.leaf(rand_tensor(&mut rng(5), &[1, 2, 2, 3], 1.0));
    let p = build_prototypes(&mut g, &[c], &[f], PrototypeNorm::Off).unwrap();
    assert!(g.value(p).data().iter().all(|&x| x == 0.0));

    assert!(matches!(build_prototypes(&mut g, &[], &[], PrototypeNorm::Off), Err(Error::Subset(_))));
}

#[test]
fn softmax_prototypes_normalize_each_class() {
    let mut g = Graph::<f64>::new();
    let mut r = rng(6);
    let cs: Vec<Var> = (0..2).map(|_| g.leaf(rand_tensor(&mut r, &[1, 3, 3, 4], 2.0))).collect();
    let ones: Vec<Var> = (0..2).map(|_| g.leaf(Tensor::full(&[1, 3, 3, 2], 1.0))).collect();
    let p = build_prototypes(&mut g, &cs, &ones, PrototypeNorm::Softmax).unwrap();
    // With unit features each prototype entry is the sum of the class weights.
    assert!(g.value(p).data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
}

#[test]
fn spatial_perceptron_matches_brute_force() {
    for inst in 0..5 {
        let cfg = oracle_config(3, 5, 16);
        let store = store_for(&cfg, 10 + inst);
        let mut r = rng(20 + inst);
        let sem: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut r, &[2, 4, 4, 16], 1.0)).collect();
        let protos = rand_tensor(&mut r, &[2, 5, 16], 1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let sv = leaves(&mut g, &sem);
        let pv = g.leaf(protos.clone());
        let out = spatial_perceptron(&mut g, &p, &cfg, 2, pv, &sv, true).unwrap();
        let expect = sp_oracle(&store, 2, protos.data(), &sem, 5, 8);
        assert!(max_abs_diff(g.value(out.f_se).data(), &expect) < 1e-5);

        // Streaming and materialized class averages agree.
        let lean = spatial_perceptron(&mut g, &p, &cfg, 2, pv, &sv, false).unwrap();
        assert!(max_abs_diff(g.value(lean.f_se).data(), g.value(out.f_se).data()) < 1e-12);
        let acts = g.value(out.activations.unwrap()).clone();
        assert_eq!(acts.shape(), &[2, 16, 5, 16]);
    }
}

#[test]
fn spatial_perceptron_symmetries() {
    let cfg = oracle_config(2, 5, 16);
    let store = store_for(&cfg, 30);
    let mut r = rng(31);
    let f = rand_tensor(&mut r, &[1, 4, 4, 16], 1.0);
    let (pa, pb) = (rand_tensor(&mut r, &[1, 5, 16], 1.0), rand_tensor(&mut r, &[1, 5, 16], 1.0));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let fv = g.leaf(f.clone());
    let (a, b) = (g.leaf(pa), g.leaf(pb));
    // A single key makes the output independent of the queries.
    let oa = spatial_perceptron(&mut g, &p, &cfg, 0, a, &[fv], false).unwrap();
    let ob = spatial_perceptron(&mut g, &p, &cfg, 0, b, &[fv], false).unwrap();
    assert!(max_abs_diff(g.value(oa.f_se).data(), g.value(ob.f_se).data()) < 1e-12);
    // Two identical keys reproduce the single-key output.
    let f2 = g.leaf(f);
    let twin = spatial_perceptron(&mut g, &p, &cfg, 0, a, &[fv, f2], false).unwrap();
    assert!(max_abs_diff(g.value(twin.f_se).data(), g.value(oa.f_se).data()) < 1e-12);
}

#[test]
fn heads_must_divide_channels() {
    let mut cfg = oracle_config(2, 5, 16);
    cfg.sp_heads = 3;
    let store = store_for(&oracle_config(2, 5, 16), 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let f = g.leaf(Tensor::zeros(&[1, 2, 2, 16]));
    let pr = g.leaf(Tensor::zeros(&[1, 5, 16]));
    assert!(matches!(spatial_perceptron(&mut g, &p, &cfg, 0, pr, &[f], false), Err(Error::Config(_))));
    cfg.sp_heads = 8;
    cfg.rp_heads = 5;
    assert!(matches!(robustness_perceptron(&mut g, &p, &cfg, 0, f, &[f]), Err(Error::Config(_))));
}

#[test]
fn robustness_perceptron_matches_brute_force() {
    for inst in 0..5 {
        let cfg = oracle_config(3, 5, 16);
        let store = store_for(&cfg, 40 + inst);
        let mut r = rng(50 + inst);
        let sem: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut r, &[2, 4, 4, 16], 1.0)).collect();
        let fse = rand_tensor(&mut r, &[2, 4, 4, 16], 1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let sv = leaves(&mut g, &sem);
        let fv = g.leaf(fse.clone());
        let (fused, maps) = robustness_perceptron(&mut g, &p, &cfg, 3, fv, &sv).unwrap();
        let (ef, em) = rp_oracle(&store, 3, &fse, &sem, 4);
        assert!(max_abs_diff(g.value(fused).data(), &ef) < 1e-5);
        assert!(max_abs_diff(maps.data(), &em) < 1e-5);
    }
}

#[test]
fn robustness_maps_single_and_identical_modalities() {
    let cfg = oracle_config(3, 5, 16);
    let store = store_for(&cfg, 60);
    let mut r = rng(61);
    let f = rand_tensor(&mut r, &[1, 4, 4, 16], 1.0);
    let q = rand_tensor(&mut r, &[1, 4, 4, 16], 1.0);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (fv, qv) = (g.leaf(f), g.leaf(q));
    let (_, one) = robustness_perceptron(&mut g, &p, &cfg, 0, qv, &[fv]).unwrap();
    assert!(one.data().iter().all(|&x| x == 1.0));
    let (_, three) = robustness_perceptron(&mut g, &p, &cfg, 0, qv, &[fv, fv, fv]).unwrap();
    assert!(three.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn sgf_forward_is_the_stage_composition() {
    let cfg = oracle_config(3, 5, 16);
    let store = store_for(&cfg, 70);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (pyr, _) = pyramid(&mut g, &cfg, &["m0", "m1", "m2"], 1, 71);
    let out = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m0", "m1", "m2"], false).unwrap();
    for s in 0..4 {
        let sem: Vec<Var> = (0..3)
            .map(|m| project_semantic(&mut g, &p, &cfg, pyr.features[m][s], &format!("m{m}"), s).unwrap())
            .collect();
        let cs: Vec<Var> = sem.iter().map(|&f| filter_class(&mut g, &p, f, s)).collect();
        let pr = build_prototypes(&mut g, &cs, &sem, cfg.prototype_norm).unwrap();
        let sp = spatial_perceptron(&mut g, &p, &cfg, s, pr, &sem, false).unwrap();
        let (fused, maps) = robustness_perceptron(&mut g, &p, &cfg, s, sp.f_se, &sem).unwrap();
        assert_eq!(g.value(fused), g.value(out.fused[s]));
        assert_eq!(&maps, &out.maps[s].maps);
        for px in maps.data().chunks(maps.shape()[2] * maps.shape()[3]).collect::<Vec<_>>().windows(3).step_by(3) {
            for i in 0..px[0].len() {
                assert!((px[0][i] + px[1][i] + px[2][i] - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn permutation_and_subset_consistency() {
    let cfg = oracle_config(3, 5, 16);
    let store = store_for(&cfg, 80);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (pyr, raw) = pyramid(&mut g, &cfg, &["m0", "m1", "m2"], 2, 81);
    let a = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m0", "m1", "m2"], false).unwrap();
    let b = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m2", "m0", "m1"], false).unwrap();
    for s in 0..4 {
        assert!(max_abs_diff(g.value(a.fused[s]).data(), g.value(b.fused[s]).data()) < 1e-6);
        for id in ["m0", "m1", "m2"] {
            assert_eq!(a.maps[s].modality(id), b.maps[s].modality(id));
        }
        assert_eq!(b.maps[s].modalities, vec!["m2", "m0", "m1"]);
    }

    // Dropping a modality equals a pyramid that never had it.
    let sub = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m0", "m2"], false).unwrap();
    let mut g2 = Graph::new();
    let p2 = store.bind(&mut g2);
    let feats: Vec<[Var; 4]> = [0, 2]
        .iter()
        .map(|&m| {
            let v = leaves(&mut g2, &raw[m]);
            [v[0], v[1], v[2], v[3]]
        })
        .collect();
    let small = FeaturePyramid {
        modalities: vec!["m0".into(), "m2".into()],
        features: feats,
    };
    let only = sgf::sgf_forward(&mut g2, &p2, &cfg, &small, &["m0", "m2"], false).unwrap();
    for s in 0..4 {
        assert_eq!(g.value(sub.fused[s]), g2.value(only.fused[s]));
        assert_eq!(sub.maps[s], only.maps[s]);
    }
}

#[test]
fn singleton_subset_gives_unit_maps_and_empty_subset_fails() {
    let cfg = oracle_config(3, 5, 16);
    let store = store_for(&cfg, 90);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (pyr, _) = pyramid(&mut g, &cfg, &["m0", "m1", "m2"], 1, 91);
    let out = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m1"], false).unwrap();
    for m in &out.maps {
        assert!(m.maps.data().iter().all(|&x| x == 1.0));
    }
    let none: [&str; 0] = [];
    assert!(matches!(sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &none, false), Err(Error::Subset(_))));
    assert!(matches!(sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m9"], false), Err(Error::Subset(_))));
}

#[test]
fn diagnostics_keep_per_class_activations() {
    let cfg = oracle_config(2, 4, 16);
    let store = store_for(&cfg, 95);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (pyr, _) = pyramid(&mut g, &cfg, &["m0", "m1"], 1, 96);
    let out = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m0", "m1"], true).unwrap();
    for d in &out.diagnostics {
        let a = g.value(d.activations.unwrap()).clone();
        let (s, c, k) = (a.shape()[1], a.shape()[3], a.shape()[2]);
        let f = g.value(d.f_se).data();
        for px in 0..s {
            for ch in 0..c {
                let mean: f64 = (0..k).map(|i| a.data()[(px * k + i) * c + ch]).sum::<f64>() / k as f64;
                assert!((mean - f[px * c + ch]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sampling_branch_equals_singleton_fusion() {
    let cfg = oracle_config(3, 5, 16);
    let store = store_for(&cfg, 100);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (pyr, _) = pyramid(&mut g, &cfg, &["m0", "m1", "m2"], 1, 101);
    let full = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m0", "m1", "m2"], false).unwrap();
    let mut r = rng(102);
    for s in 0..4 {
        let picked = mas::mas_forward(&mut g, &p, &cfg, s, &full.modalities, &full.semantics[s], &full.canonical_maps[s], 1e-8, &mut r, Mode::Train).unwrap();
        let single = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &[picked.modality.as_str()], false).unwrap();
        assert_eq!(g.value(picked.fused), g.value(single.fused[s]));
        assert!((picked.distribution.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let err = mas::mas_forward(&mut g, &p, &cfg, 0, &full.modalities, &full.semantics[0], &full.canonical_maps[0], 1e-8, &mut r, Mode::Infer);
    assert!(matches!(err, Err(Error::Mode { .. })));
}

#[test]
fn fragile_modality_is_sampled_most() {
    let maps = Tensor::from_vec(&[1, 3, 2, 1], vec![0.5, 0.5, 0.3, 0.3, 0.2, 0.2]).unwrap();
    let rhat = mas::invert_robustness(&maps, 1e-8);
    let d = mas::pool_probabilities(&rhat, &["a".into(), "b".into(), "c".into()]);
    let best = (0..3).max_by(|&i, &j| d.probs[i].partial_cmp(&d.probs[j]).unwrap()).unwrap();
    assert_eq!(best, 2);
}

#[test]
fn scales_sample_independently() {
    let cfg = oracle_config(3, 5, 16);
    let store = store_for(&cfg, 110);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let (pyr, _) = pyramid(&mut g, &cfg, &["m0", "m1", "m2"], 1, 111);
    let full = sgf::sgf_forward(&mut g, &p, &cfg, &pyr, &["m0", "m1", "m2"], false).unwrap();
    let mut r = rng(112);
    let mut differ = false;
    for _ in 0..100 {
        let picks: Vec<String> = (0..2)
            .map(|s| {
                let rhat = mas::invert_robustness(&full.canonical_maps[s], 1e-8);
                let d = mas::pool_probabilities(&rhat, &full.modalities);
                full.modalities[mas::sample_modality(&d, &mut r).unwrap()].clone()
            })
            .collect();
        differ |= picks[0] != picks[1];
    }
    assert!(differ);
}

#[test]
fn fuse_scale_rejects_no_modalities() {
    let cfg = oracle_config(1, 3, 16);
    let store = store_for(&cfg, 1);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    assert!(fuse_scale(&mut g, &p, &cfg, 0, &[], false).is_err());
}
