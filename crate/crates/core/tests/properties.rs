use proptest::prelude::*;
use saliency_core::attention::{sia_block, ForegroundMask, SiaMode, TaskTokens};
use saliency_core::geometry::{
    depth_pe_table, rt2t_fold, soft_split, spatial_pe_2d, ss_length, DepthMap, SoftSplitSpec,
    TokenSeq, ENCODER_SCHEDULE,
};
use saliency_core::init::{init, RngSpec};
use saliency_core::layers::{Graph, ParamBuilder, TransformerLayerParams};
use saliency_core::{ParamStore, Tape, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor {
    init(shape, RngSpec::new(seed)).scale((*shape.last().unwrap() as f64).sqrt())
}

fn spec_strategy() -> impl Strategy<Value = SoftSplitSpec> {
    (2usize..6)
        .prop_flat_map(|k| (Just(k), 0..k, 0..k))
        .prop_map(|(k, s, p)| SoftSplitSpec::new(k, s, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoder_schedule_divides_by_4_8_16(n in 1usize..40) {
        let h = 16 * n;
        let mut side = h;
        for (spec, div) in ENCODER_SCHEDULE.iter().zip([4, 8, 16]) {
            side = ss_length(side, *spec).unwrap();
            prop_assert_eq!(side, h / div);
        }
    }

    #[test]
    fn soft_split_grid_follows_length_formula(
        spec in spec_strategy(),
        h in 6usize..14,
        w in 6usize..14,
        e in 1usize..3,
    ) {
        let seq = soft_split(&rand(&[h, w, e], 1), spec).unwrap();
        prop_assert_eq!(seq.grid(), (ss_length(h, spec).unwrap(), ss_length(w, spec).unwrap()));
        prop_assert_eq!(seq.width(), e * spec.k * spec.k);
    }

    #[test]
    fn fold_is_adjoint_of_soft_split(
        spec in spec_strategy(),
        h in 6usize..14,
        w in 6usize..14,
        e in 1usize..3,
        seed in any::<u64>(),
    ) {
        let a = rand(&[h, w, e], seed);
        let split = soft_split(&a, spec).unwrap();
        let b = rand(&[split.len(), split.width()], seed ^ 1);
        let lhs = split.tokens().dot(&b).unwrap();
        let b_seq = TokenSeq::new(b, split.grid()).unwrap();
        let folded = rt2t_fold(&b_seq, spec, (h, w), e).unwrap();
        let rhs = a.dot(&folded).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn fold_then_split_recovers_grid(spec in spec_strategy(), h in 6usize..14, w in 6usize..14) {
        let grid = (ss_length(h, spec).unwrap(), ss_length(w, spec).unwrap());
        let seq = TokenSeq::new(rand(&[grid.0 * grid.1, spec.k * spec.k], 2), grid).unwrap();
        let image = rt2t_fold(&seq, spec, (h, w), 1).unwrap();
        prop_assert_eq!(soft_split(&image, spec).unwrap().grid(), grid);
    }

    #[test]
    fn encodings_are_bounded(h in 1usize..12, w in 1usize..12, q in 1usize..8, level in 0.0f64..=1.0) {
        let pe = spatial_pe_2d((h, w), 4 * q).unwrap();
        prop_assert!(pe.table.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let depth = DepthMap::new(Tensor::full([8, 8], level)).unwrap();
        let dpe = depth_pe_table(&depth, (h, w), 2 * q).unwrap();
        prop_assert!(dpe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn depth_frequencies_strictly_decrease(dep in 1u32..200, half in 2usize..16) {
        let d = 2 * half;
        let arg = |m: usize| f64::from(dep) / 10000f64.powf(2.0 * m as f64 / d as f64);
        for m in 1..half {
            prop_assert!(arg(m) < arg(m - 1));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = rand(&[4, 7], seed);
        let s = x.softmax_rows().unwrap();
        for r in 0..4 {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = x.map(|v| v + shift).softmax_rows().unwrap();
        prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let a = rand(&[3, 4], seed);
        let b = rand(&[4, 5], seed ^ 2);
        let c = rand(&[5, 2], seed ^ 3);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn sia_select_and_masked_agree(
        bits in proptest::collection::vec(any::<bool>(), 12),
        seed in any::<u64>(),
        heads in prop_oneof![Just(1usize), Just(2), Just(4)],
    ) {
        let d = 8;
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, RngSpec::new(seed));
        let layer = TransformerLayerParams::new(&mut b, "sia", d, heads, 2).unwrap();
        let tasks = TaskTokens::new(&mut b, d);
        let mask = ForegroundMask::new(bits, (3, 4)).unwrap();
        let patches = rand(&[12, d], seed ^ 5);
        let pe = rand(&[12, d], seed ^ 6);
        let run = |mode| {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store);
            let (p, t) = sia_block(
                &g, &layer, g.constant(patches.clone()), tasks.vars(&g), &mask,
                g.constant(pe.clone()), &tasks.encodings(&g), mode,
            ).unwrap();
            [p.value(), t.saliency.value(), t.boundary.value()]
        };
        let a = run(SiaMode::Select);
        let m = run(SiaMode::Masked);
        for (x, y) in a.iter().zip(&m) {
            prop_assert!(x.max_abs_diff(y) < 1e-9);
        }
    }
}
