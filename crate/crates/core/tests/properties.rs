use proptest::prelude::*;

use midway::data::{BinMatrix, MatrixData};
use midway::dynamics::Prediction;
use midway::harness::testing::tiny_config;
use midway::objective::{dense_forward_loss, NormMode};
use midway::tensor::Mat;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    proptest::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
}

proptest! {
    #[test]
    fn matrix_bytes_roundtrip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>(), code in 0u8..4) {
        let n = rows * cols;
        let vals: Vec<u64> = (0..n as u64).map(|i| seed.wrapping_mul(i + 1).rotate_left(17)).collect();
        let data = match code {
            0 => MatrixData::U8(vals.iter().map(|v| *v as u8).collect()),
            1 => MatrixData::I32(vals.iter().map(|v| *v as i32).collect()),
            2 => MatrixData::F32(vals.iter().map(|v| (*v as f32) * 1e-10).collect()),
            _ => MatrixData::F64(vals.iter().map(|v| f64::from_bits(*v & 0x3fff_ffff_ffff_ffff)).collect()),
        };
        let m = BinMatrix::new(rows, cols, data).unwrap();
        let bytes = m.to_bytes();
        prop_assert_eq!(bytes.len(), 16 + n * [1, 4, 4, 8][code as usize]);
        prop_assert_eq!(BinMatrix::from_bytes(&bytes).unwrap(), m);
        prop_assert!(BinMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err() || n == 0);
    }

    #[test]
    fn dense_loss_is_bounded_and_scale_free(p in mat(5, 4), t in mat(5, 4), s in 0.1f64..50.0) {
        prop_assume!((0..5).all(|r| p.row(r).iter().any(|v| v.abs() > 1e-3) && t.row(r).iter().any(|v| v.abs() > 1e-3)));
        let pred = Prediction { tokens: p.clone(), level: 1 };
        let a = dense_forward_loss(&pred, &t, NormMode::Exact).unwrap().value;
        prop_assert!((0.0..=4.0 + 1e-12).contains(&a));
        let scaled = Prediction { tokens: p.scale(s), level: 1 };
        let b = dense_forward_loss(&scaled, &t.scale(1.0 / s), NormMode::Exact).unwrap().value;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn config_text_roundtrip(seed in any::<u64>(), lr in 1e-6f64..1.0, batch in 1usize..64) {
        let mut cfg = tiny_config();
        cfg.run.seed = seed;
        cfg.objective.optim.lr = lr;
        cfg.run.batch_size = batch;
        let back = tiny_config().parse_over(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
