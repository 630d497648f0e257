use std::path::Path;

use ndarray::Array2;
use proptest::prelude::*;

use cdtsde::io::{decode_tensor, encode_tensor, Tensor};
use cdtsde::tasks::seg_metrics;

fn tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..5).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL, n)
            .prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
    })
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::bool::ANY, h * w)
        .prop_map(move |bits| Array2::from_shape_fn((h, w), |(y, x)| if bits[y * w + x] { 1.0 } else { -1.0 }))
}

/// Directed Hausdorff distances by exhaustive scan.
fn brute_hausdorff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let pts = |m: &Array2<f64>| -> Vec<(f64, f64)> {
        m.indexed_iter().filter(|(_, &v)| v > 0.0).map(|((y, x), _)| (y as f64, x as f64)).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

proptest! {
    #[test]
    fn tensor_round_trip_is_bit_identical(t in tensor()) {
        let bytes = encode_tensor(&t).unwrap();
        prop_assert_eq!(bytes.len(), 8 + 4 * t.dims.len() + 4 * t.data.len());
        let back = decode_tensor(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&back.dims, &t.dims);
        let same = back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn truncated_tensor_is_rejected(t in tensor(), cut in 1usize..8) {
        let bytes = encode_tensor(&t).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_tensor(&bytes[..keep], Path::new("mem")).is_err());
    }

    #[test]
    fn dice_iou_identity(a in mask(6, 7), b in mask(6, 7)) {
        let m = seg_metrics(a.view(), b.view()).unwrap();
        prop_assert!(m.dice >= m.iou - 1e-12);
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-9);
    }

    #[test]
    fn hausdorff_matches_exhaustive_scan(a in mask(5, 6), b in mask(5, 6)) {
        let any = |m: &Array2<f64>| m.iter().any(|&v| v > 0.0);
        prop_assume!(any(&a) && any(&b));
        let m = seg_metrics(a.view(), b.view()).unwrap();
        prop_assert!((m.hausdorff - brute_hausdorff(&a, &b)).abs() < 1e-12);
    }
}
