use proptest::prelude::*;
use sdmoe_core::gsahf::{
    auto_epsilon, cross_align, hyperconv, multi_level_fuse, AlignWeights, Fc, GramBasis, HyperConvParams, Hypergraph,
};
use sdmoe_core::{Graph, ParamStore, RngStream, Tensor};

fn points() -> impl Strategy<Value = (Tensor, f64)> {
    (2usize..16, 1usize..5).prop_flat_map(|(v, d)| {
        (
            proptest::collection::vec(-3.0f64..3.0, v * d).prop_map(move |x| Tensor::new([v, d], x).unwrap()),
            0.05f64..4.0,
        )
    })
}

#[test]
fn propagation_is_row_stochastic_over_100_point_sets() {
    let mut rng = RngStream::new(1);
    for case in 0..100 {
        let v = 2 + rng.below(30);
        let d = 1 + rng.below(6);
        let x = rng.normal_tensor([v, d], 1.0);
        let eps = if case % 2 == 0 {
            auto_epsilon(&x)
        } else {
            rng.uniform(0.01, 3.0)
        };
        let p = Hypergraph::build(&x, eps).unwrap().propagation().unwrap();
        for r in 0..v {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-10, "case {case} row {r}: {s}");
            assert!(p.row(r).iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn three_point_hand_example() {
    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
    let hg = Hypergraph::build(&x, 1.5).unwrap();
    let h = hg.incidence();
    assert_eq!(h.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(hg.d_v, vec![2, 2, 1]);
    assert_eq!(hg.d_e, vec![2, 2, 1]);
    let p = hg.propagation().unwrap();
    let want = [0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 1.0];
    for (a, b) in p.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_theta2_is_exact_identity() {
    let mut rng = RngStream::new(2);
    let mut store = ParamStore::new();
    let hp = HyperConvParams::init(&mut store, "h", 5, &mut rng).unwrap();
    let x = rng.normal_tensor([9, 5], 1.0);
    let hg = Hypergraph::build(&x, auto_epsilon(&x)).unwrap();
    let mut g = Graph::new(&store);
    let xv = g.constant(x.clone());
    let y = hyperconv(&mut g, xv, &hg, &hp).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn hyperconv_matches_direct_formula() {
    let mut rng = RngStream::new(3);
    let mut store = ParamStore::new();
    let hp = HyperConvParams::init(&mut store, "h", 3, &mut rng).unwrap();
    *store.tensor_mut(hp.theta2) = rng.normal_tensor([3, 3], 1.0);
    let x = rng.normal_tensor([6, 3], 1.0);
    let hg = Hypergraph::build(&x, 1.2).unwrap();

    // D_v⁻¹ H D_e⁻¹ Hᵀ assembled from the incidence matrix.
    let h = hg.incidence();
    let mut dv_inv_h = h.clone();
    for i in 0..6 {
        for e in 0..6 {
            dv_inv_h.data_mut()[i * 6 + e] /= hg.d_v[i] as f64;
        }
    }
    let mut de_inv_ht = h.transpose().unwrap();
    for e in 0..6 {
        for j in 0..6 {
            de_inv_ht.data_mut()[e * 6 + j] /= hg.d_e[e] as f64;
        }
    }
    let p = dv_inv_h.matmul(&de_inv_ht).unwrap();
    let want = x
        .add(
            &p.matmul(&x)
                .unwrap()
                .matmul(store.tensor(hp.theta1))
                .unwrap()
                .matmul(store.tensor(hp.theta2))
                .unwrap(),
        )
        .unwrap();
    let mut g = Graph::new(&store);
    let xv = g.constant(x);
    let y = hyperconv(&mut g, xv, &hg, &hp).unwrap();
    assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-12);
}

proptest! {
    #[test]
    fn hypergraph_is_permutation_equivariant(
        (x, eps) in points(),
        seed in 0u64..1000,
    ) {
        let v = x.rows();
        let mut perm: Vec<usize> = (0..v).collect();
        let mut rng = RngStream::new(seed);
        for i in (1..v).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let px = x.gather_rows(&perm);
        let a = Hypergraph::build(&x, eps).unwrap();
        let b = Hypergraph::build(&px, eps).unwrap();
        for i in 0..v {
            for e in 0..v {
                prop_assert_eq!(b.contains(i, e), a.contains(perm[i], perm[e]));
            }
        }
        let pa = a.propagation().unwrap();
        let pb = b.propagation().unwrap();
        for i in 0..v {
            for j in 0..v {
                prop_assert!((pb.at(i, j) - pa.at(perm[i], perm[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incidence_is_symmetric_with_self_loops((x, eps) in points()) {
        let hg = Hypergraph::build(&x, eps).unwrap();
        for i in 0..x.rows() {
            prop_assert!(hg.contains(i, i));
            for e in 0..x.rows() {
                prop_assert_eq!(hg.contains(i, e), hg.contains(e, i));
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd_and_scale_free(
        data in proptest::collection::vec(-2.0f64..2.0, 24),
        probe in proptest::collection::vec(-1.0f64..1.0, 4),
        c in 0.1f64..10.0,
    ) {
        let k = Tensor::new([6, 4], data).unwrap();
        prop_assume!(k.max_abs() > 1e-3);
        let b = GramBasis::from_keys(&k).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((b.gram.at(i, j) - b.gram.at(j, i)).abs() <= 1e-10);
            }
        }
        let v = Tensor::new([4, 1], probe).unwrap();
        let quad = v.transpose().unwrap().matmul(&b.gram).unwrap().matmul(&v).unwrap().item();
        prop_assert!(quad >= -1e-10);
        let scaled = GramBasis::from_keys(&k.scale(c)).unwrap();
        prop_assert!(scaled.normalized().max_abs_diff(&b.normalized()).unwrap() < 1e-12);
        prop_assert!((b.normalized().frobenius_norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_align_matches_composed_oracle() {
    let mut rng = RngStream::new(4);
    let mut store = ParamStore::new();
    let fc = Fc::init(&mut store, "fc", 6, 3, &mut rng, true).unwrap();
    *store.tensor_mut(fc.b.unwrap()) = rng.normal_tensor([3], 1.0);
    let align = AlignWeights::init(&mut store, "a").unwrap();
    *store.tensor_mut(align.w_r) = Tensor::new([1], vec![0.7]).unwrap();
    *store.tensor_mut(align.w_x) = Tensor::new([1], vec![-0.4]).unwrap();
    let kr = rng.normal_tensor([5, 3], 1.0);
    let kx = rng.normal_tensor([5, 3], 1.0);

    let gr = GramBasis::from_keys(&kr).unwrap().normalized();
    let gx = GramBasis::from_keys(&kx).unwrap().normalized();
    let f_x = kx.add(&kx.matmul(&gr).unwrap().scale(-0.4)).unwrap();
    let f_r = kr.add(&kr.matmul(&gx).unwrap().scale(0.7)).unwrap();
    let cat = Tensor::concat_cols(&[&f_x, &f_r]).unwrap();
    let mut want = cat.matmul(store.tensor(fc.w)).unwrap();
    let bias = store.tensor(fc.b.unwrap()).clone();
    for r in 0..5 {
        for c in 0..3 {
            want.data_mut()[r * 3 + c] += bias.data()[c];
        }
    }

    let mut g = Graph::new(&store);
    let (a, b) = (g.constant(kr), g.constant(kx));
    let y = cross_align(&mut g, a, b, &align, &fc).unwrap();
    assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn isotropic_keys_map_to_scaled_copies() {
    // Orthogonal columns of equal norm give ĝ = I/√D, so mapping only rescales.
    let k = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let g = GramBasis::from_keys(&k).unwrap().normalized();
    let want = Tensor::eye(2).scale(1.0 / 2f64.sqrt());
    assert!(g.max_abs_diff(&want).unwrap() < 1e-15);
}

#[test]
fn multi_level_fusion_concatenates_then_projects() {
    let mut rng = RngStream::new(5);
    let a = rng.normal_tensor([4, 2], 1.0);
    let b = rng.normal_tensor([4, 2], 1.0);
    let w = rng.normal_tensor([4, 2], 1.0);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (av, bv, wv) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(w.clone()));
    let y = multi_level_fuse(&mut g, &[av, bv], wv).unwrap();
    let want = Tensor::concat_cols(&[&a, &b]).unwrap().matmul(&w).unwrap();
    assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-14);
    let c = g.constant(Tensor::zeros([3, 2]));
    assert!(multi_level_fuse(&mut g, &[av, c], wv).is_err());
}
