use gpp_core::detect::{encode_window_targets, sliding_window_detect, window_starts, WindowScheme};
use proptest::prelude::*;

fn logit(f: f64) -> f64 {
    let f = f.clamp(1e-12, 1.0 - 1e-12);
    (f / (1.0 - f)).ln()
}

proptest! {
    #[test]
    fn sn_decode_of_exact_targets_recovers_the_plane(
        (nz, len, gppi, stride) in (8usize..400)
            .prop_flat_map(|nz| (Just(nz), 1..=nz, 0..nz))
            .prop_flat_map(|(nz, len, gppi)| (Just(nz), Just(len), Just(gppi), 1..=len.min(32))),
    ) {
        let (g, _) = sliding_window_detect(nz, len, stride, WindowScheme::Sn, |start| {
            let t = encode_window_targets(gppi as i64, start, len)?;
            Ok((f64::from(u8::from(t.contains)), logit(t.offset_frac.unwrap_or(0.5))))
        }).unwrap();
        prop_assert!((g - gppi as i64).abs() <= 1, "decoded {} for {}", g, gppi);
    }

    #[test]
    fn p_linear_is_symmetric_and_bounded(start in 0usize..300, len in 2usize..80, d in 0i64..100) {
        let center = start as f64 + len as f64 / 2.0;
        let t = encode_window_targets(start as i64 + len as i64 / 2, start, len).unwrap();
        if len % 2 == 0 {
            prop_assert_eq!(t.p_linear, 1.0);
        }
        let lo = encode_window_targets((center - d as f64).floor() as i64, start, len).unwrap();
        let hi = encode_window_targets((center + d as f64).ceil() as i64, start, len).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo.p_linear));
        if len % 2 == 0 {
            prop_assert_eq!(lo.p_linear, hi.p_linear);
        }
        let outside = encode_window_targets(start as i64 + len as i64 + d, start, len).unwrap();
        prop_assert_eq!(outside.p_linear, 0.0);
        prop_assert!(!outside.contains && outside.offset_frac.is_none());
    }

    #[test]
    fn window_starts_cover_the_volume(nz in 1usize..500, len in 1usize..64, stride in 1usize..40) {
        prop_assume!(len <= nz);
        let s = window_starts(nz, len, stride).unwrap();
        prop_assert_eq!(s[0], 0);
        prop_assert_eq!(*s.last().unwrap() + len, nz);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= stride));
    }
}

#[test]
fn bm_decode_is_the_best_window_center() {
    let (g, trace) = sliding_window_detect(100, 20, 1, WindowScheme::Bm, |start| {
        Ok((encode_window_targets(37, start, 20)?.p_linear, 0.0))
    })
    .unwrap();
    assert_eq!(g, 37);
    assert_eq!(trace.len(), 81);
}

#[test]
fn ties_go_to_the_lowest_start() {
    let (g, _) = sliding_window_detect(50, 10, 5, WindowScheme::Bm, |_| Ok((0.5, 0.0))).unwrap();
    assert_eq!(g, 5);
}
