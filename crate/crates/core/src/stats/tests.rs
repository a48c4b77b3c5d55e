use super::*;
use proptest::prelude::*;

#[test]
fn diff_examples() {
    let ids = |v: &[f64]| -> Vec<(String, f64)> {
        v.iter().enumerate().map(|(i, x)| (format!("img{i}"), *x)).collect()
    };
    assert_eq!(metric_diff(&ids(&[3.0, 5.0]), &ids(&[1.0, 2.0])).unwrap(), vec![2.0, 3.0]);
    assert_eq!(metric_diff(&ids(&[1.0, 2.0]), &ids(&[1.0, 2.0])).unwrap(), vec![0.0, 0.0]);
    let mut b = ids(&[1.0, 2.0]);
    b.swap(0, 1);
    assert!(matches!(metric_diff(&ids(&[3.0, 5.0]), &b), Err(Error::Input(_))));
}

#[test]
fn all_positive_five() {
    let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert_eq!(r.w, 15.0);
    assert!((r.sigma_w - 55f64.sqrt()).abs() < 1e-12);
    assert!((r.z - 2.0226).abs() < 1e-4);
    assert_eq!(r.p_exact_greater, Some(1.0 / 32.0));
    assert_eq!(r.p_exact, Some(2.0 / 32.0));
}

#[test]
fn mirrored_sample_is_zero() {
    let r = wilcoxon_signed_rank(&[-1.0, 1.0, -2.5, 2.5]).unwrap();
    assert_eq!((r.w, r.z), (0.0, 0.0));
    assert_eq!(r.p_exact, Some(1.0));
}

#[test]
fn zeros_dropped_and_all_zero_degenerate() {
    let r = wilcoxon_signed_rank(&[0.0, 1.0, -2.0, 0.0]).unwrap();
    assert_eq!(r.n, 2);
    assert_eq!(r.w, -1.0);
    assert!(matches!(wilcoxon_signed_rank(&[0.0, 0.0]), Err(Error::Degenerate(_))));
}

#[test]
fn normal_and_exact_agree_from_ten() {
    // The approximation is coarse for very small n; from n = 10 the gap stays under 0.05.
    for n in 10..=EXACT_MAX_N {
        let ranks: Vec<f64> = (1..=n).map(|r| r as f64).collect();
        let max_w = (n * (n + 1) / 2) as i64;
        let sigma = ((n * (n + 1) * (2 * n + 1)) as f64 / 6.0).sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for w in (-max_w..=max_w).step_by(2) {
            let (exact, _) = exact_p(&ranks, w as f64);
            let approx = (2.0 * normal.sf((w as f64 / sigma).abs())).min(1.0);
            assert!((exact - approx).abs() < 0.05, "n={n} W={w}: {exact} vs {approx}");
        }
    }
}

#[test]
fn zscore_examples() {
    let z = zscores(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let s = zscore_summary(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    assert!(z.iter().sum::<f64>().abs() < 1e-12);
    assert!((s.std - 1.0).abs() < 1e-12);
    assert!(matches!(zscores(&[2.0; 5]), Err(Error::Degenerate(_))));
    let vals: Vec<f64> = (1..=9).map(f64::from).collect();
    let s = zscore_summary(&vals).unwrap();
    let z = zscores(&vals).unwrap();
    // Sorted input: index (n−1)/4 = 2 and 3(n−1)/4 = 6 land exactly on order statistics.
    assert!((s.q1 - z[2]).abs() < 1e-12);
    assert!((s.median - z[4]).abs() < 1e-12);
    assert!((s.q3 - z[6]).abs() < 1e-12);
    assert!(zscore_summary(&[1.0, 2.0, 3.0]).is_err());
}

#[test]
fn mos_examples() {
    let one = mos_stats(&[4.0]).unwrap();
    assert_eq!((one.mean, one.std, one.max, one.min), (4.0, 0.0, 4.0, 4.0));
    let reference = [
        4.82, 4.38, 4.36, 4.47, 4.37, 4.10, 4.17, 4.41, 4.00, 4.59, 4.25, 4.51, 4.78, 4.26, 4.70,
    ];
    let m = mos_stats(&reference).unwrap();
    assert!((m.mean - 4.41).abs() < 0.005);
    assert!((m.std - 0.24).abs() < 0.005);
    assert_eq!((m.max, m.min), (4.82, 4.00));
    assert!(mos_stats(&[]).is_err());
    assert!(mos_stats(&[5.5]).is_err());
    let recs = vec![
        ("a".to_string(), "sharpness".to_string(), 4.0),
        ("a".to_string(), "sharpness".to_string(), 5.0),
        ("b".to_string(), "detail".to_string(), 3.0),
    ];
    let t = mos_aggregate(&recs).unwrap();
    assert_eq!(t.groups.len(), 2);
    assert_eq!(t.groups[&("a".into(), "sharpness".into())].mean, 4.5);
}

proptest! {
    #[test]
    fn w_is_antisymmetric(v in prop::collection::vec(-10i32..10, 1..15)) {
        let d: Vec<f64> = v.iter().map(|&x| x as f64 * 0.5).collect();
        prop_assume!(d.iter().any(|&x| x != 0.0));
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let a = wilcoxon_signed_rank(&d).unwrap();
        let b = wilcoxon_signed_rank(&neg).unwrap();
        prop_assert_eq!(a.w, -b.w);
        prop_assert_eq!(a.z, -b.z);
        prop_assert!(a.w.abs() <= (a.n * (a.n + 1)) as f64 / 2.0);
        prop_assert!((0.0..=1.0).contains(&a.p_normal));
    }

    #[test]
    fn ranks_sum_to_triangle(v in prop::collection::vec(0u8..6, 1..20)) {
        let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
        let n = x.len() as f64;
        prop_assert_eq!(average_ranks(&x).iter().sum::<f64>(), n * (n + 1.0) / 2.0);
    }

    #[test]
    fn mos_mean_within_range(v in prop::collection::vec(1.0f64..=5.0, 1..30)) {
        let m = mos_stats(&v).unwrap();
        prop_assert!(m.min <= m.mean + 1e-12 && m.mean <= m.max + 1e-12);
        let mut r = v.clone();
        r.reverse();
        prop_assert!((mos_stats(&r).unwrap().mean - m.mean).abs() < 1e-12);
    }

    #[test]
    fn diff_permutes_with_inputs(v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10)) {
        let a: Vec<(String, f64)> = v.iter().enumerate().map(|(i, p)| (i.to_string(), p.0)).collect();
        let b: Vec<(String, f64)> = v.iter().enumerate().map(|(i, p)| (i.to_string(), p.1)).collect();
        let d = metric_diff(&a, &b).unwrap();
        let (mut ra, mut rb) = (a.clone(), b.clone());
        ra.reverse();
        rb.reverse();
        let mut rd = metric_diff(&ra, &rb).unwrap();
        rd.reverse();
        prop_assert_eq!(d, rd);
    }
}
