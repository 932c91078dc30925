use pianoform_numerics::{lr_at, LrSchedule, Tape, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-30.0..30.0f64, r * c).prop_map(move |v| Tensor::new([r, c], v).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(5, 7), keep in prop::collection::vec(any::<bool>(), 7)) {
        let (rows, cols) = x.dims2("test").unwrap();
        let tape = Tape::new();
        let v = tape.constant(x);
        let mut mask = keep[..cols].to_vec();
        mask[0] = true;
        for (y, masked) in [(v.softmax().unwrap().value(), false), (v.masked_softmax(&mask).unwrap().value(), true)] {
            for r in 0..rows {
                let row = &y.data()[r * cols..(r + 1) * cols];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                if masked {
                    prop_assert!(row.iter().zip(&mask).all(|(&p, &k)| k || p == 0.0));
                }
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(x in matrix(4, 9)) {
        let (rows, cols) = x.dims2("test").unwrap();
        let tape = Tape::new();
        let y = tape.constant(x).layer_norm(1e-5).unwrap().value();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn learning_rate_stays_between_bounds(
        base in 1e-6..1.0f64,
        floor in 0.0..1.0f64,
        t_0 in 1usize..30,
        t_mult in 1usize..4,
        epoch in 0usize..2000,
    ) {
        let s = LrSchedule { base_lr: base, t_0, t_mult, eta_min: base * floor };
        let lr = lr_at(&s, epoch);
        prop_assert!(lr >= s.eta_min && lr <= base);
        let (t_cur, t_i) = s.cycle_position(epoch);
        prop_assert!(t_cur < t_i);
        if t_cur == 0 {
            prop_assert_eq!(lr, base);
        }
    }
}
