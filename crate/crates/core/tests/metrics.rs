mod common;

use common::{brute_avd, brute_boundary, brute_dice, brute_hd95, random_mask, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use voxresnet::metrics::*;
use voxresnet::LabelVolume;

fn boxed(e: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Vec<bool> {
    (0..e.iter().product())
        .map(|i| {
            let p = [i / (e[1] * e[2]), (i / e[2]) % e[1], i % e[2]];
            (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
        })
        .collect()
}

#[test]
fn dice_examples() {
    let e = [4, 4, 4];
    let a = boxed(e, [0, 0, 0], [2, 2, 2]);
    let b = boxed(e, [0, 0, 1], [2, 2, 3]);
    assert_eq!(dice(&a, &b).unwrap(), 50.0);
    assert_eq!(dice(&a, &a).unwrap(), 100.0);
    let far = boxed(e, [2, 2, 2], [4, 4, 4]);
    assert_eq!(dice(&a, &far).unwrap(), 0.0);
    assert_eq!(dice(&[false; 8], &[false; 8]).unwrap(), 100.0);
    assert!(dice(&a, &a[..10]).is_err());
}

#[test]
fn parallel_plates_five_apart() {
    let e = [10, 8, 8];
    let a = boxed(e, [2, 0, 0], [3, 8, 8]);
    let b = boxed(e, [7, 0, 0], [8, 8, 8]);
    assert_eq!(hd95(&a, &b, e, [1.0; 3]).unwrap(), 5.0);
    assert_eq!(hd95(&a, &b, e, [0.5, 3.0, 3.0]).unwrap(), 2.5);
    assert_eq!(hd95(&a, &a, e, [1.0; 3]).unwrap(), 0.0);
    assert!(hd95(&a, &vec![false; a.len()], e, [1.0; 3]).is_err());
}

#[test]
fn avd_examples() {
    let mut a = vec![false; 1000];
    let mut b = vec![false; 1000];
    a[..110].iter_mut().for_each(|v| *v = true);
    b[500..600].iter_mut().for_each(|v| *v = true);
    assert_eq!(avd(&a, &b).unwrap(), 10.0);
    assert_eq!(avd(&b, &b).unwrap(), 0.0);
    assert!(avd(&b, &vec![false; 1000]).is_err());
}

#[test]
fn avd_ignores_where_the_voxels_are() {
    let mut r = rng(1);
    let e = [8, 8, 8];
    let a = random_mask(e, &mut r);
    let b = random_mask(e, &mut r);
    let base = avd(&a, &b).unwrap();
    for _ in 0..10 {
        let mut pa = a.clone();
        let mut pb = b.clone();
        pa.shuffle(&mut r);
        pb.shuffle(&mut r);
        assert_eq!(avd(&pa, &pb).unwrap(), base);
    }
}

#[test]
fn boundary_counts_the_grid_edge_as_outside() {
    let e = [3, 3, 3];
    let full = vec![true; 27];
    let b = boundary(&full, e);
    assert_eq!(b.iter().filter(|&&v| v).count(), 26);
    assert!(!b[13]);
}

/// ≥ 50 random 16³ pairs against all-pairs brute force.
#[test]
fn metrics_match_brute_force_on_random_masks() {
    let e = [16, 16, 16];
    let mut r = rng(2);
    let spacings = [[1.0, 1.0, 1.0], [1.0, 0.5, 2.0], [3.0, 0.25, 1.0]];
    for trial in 0..60 {
        let a = random_mask(e, &mut r);
        let b = random_mask(e, &mut r);
        let s = spacings[trial % spacings.len()];
        assert_eq!(dice(&a, &b).unwrap(), brute_dice(&a, &b));
        assert_eq!(avd(&a, &b).unwrap(), brute_avd(&a, &b));
        let bnd = boundary(&a, e);
        let expected: Vec<usize> = brute_boundary(&a, e)
            .iter()
            .map(|p| (p[0] as usize * 16 + p[1] as usize) * 16 + p[2] as usize)
            .collect();
        let got: Vec<usize> = (0..bnd.len()).filter(|&i| bnd[i]).collect();
        assert_eq!(got, expected);
        assert_eq!(hd95(&a, &b, e, s).unwrap(), brute_hd95(&a, &b, e, s), "trial {trial}");
    }
}

#[test]
fn non_dyadic_anisotropic_spacing_agrees_with_brute_force() {
    let e = [12, 14, 10];
    let mut r = rng(3);
    for _ in 0..10 {
        let a = random_mask(e, &mut r);
        let b = random_mask(e, &mut r);
        let s = [1.2, 0.958, 3.0];
        let fast = hd95(&a, &b, e, s).unwrap();
        let slow = brute_hd95(&a, &b, e, s);
        assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
    }
}

#[test]
fn percentile_interpolates_linearly() {
    assert_eq!(percentile(&mut [3.0, 1.0, 2.0], 50.0), 2.0);
    assert_eq!(percentile(&mut [0.0, 10.0], 95.0), 9.5);
    assert_eq!(percentile(&mut [4.0], 95.0), 4.0);
}

fn labels(e: [usize; 3], data: Vec<u8>) -> LabelVolume {
    LabelVolume::new(e, [1.0; 3], 4, data).unwrap()
}

fn random_labels(e: [usize; 3], seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    let masks: Vec<Vec<bool>> = (0..3).map(|_| random_mask(e, &mut r)).collect();
    let data = (0..e.iter().product())
        .map(|i| (1..=3u8).rev().find(|&c| masks[c as usize - 1][i]).unwrap_or(0))
        .collect();
    labels(e, data)
}

#[test]
fn evaluate_case_on_perfect_and_broken_predictions() {
    let e = [10, 10, 10];
    let truth = random_labels(e, 4);
    let report = evaluate_case(&truth, &truth, [1.0; 3]).unwrap();
    assert_eq!(report.classes.len(), 3);
    for c in &report.classes {
        assert_eq!(c.dc_percent, 100.0);
        assert_eq!(c.hd95_mm, Some(0.0));
        assert_eq!(c.avd_percent, Some(0.0));
    }
    assert_eq!(report.get(1).unwrap().name, "CSF");

    let dropped: Vec<u8> = truth.data().iter().map(|&v| if v == 2 { 0 } else { v }).collect();
    let report = evaluate_case(&labels(e, dropped), &truth, [1.0; 3]).unwrap();
    let gm = report.get(2).unwrap();
    assert_eq!(gm.dc_percent, 0.0);
    assert_eq!(gm.hd95_mm, None);
    assert_eq!(gm.avd_percent, Some(100.0));
    assert_eq!(report.get(3).unwrap().dc_percent, 100.0);
}

#[test]
fn report_is_composed_of_single_metric_calls() {
    let e = [12, 10, 9];
    let pred = random_labels(e, 5);
    let truth = random_labels(e, 6);
    let s = [1.0, 1.0, 2.5];
    let report = evaluate_case(&pred, &truth, s).unwrap();
    for c in 1..=3u8 {
        let (a, b) = (pred.mask(c), truth.mask(c));
        let m = report.get(c).unwrap();
        assert_eq!(m.dc_percent, dice(&a, &b).unwrap());
        assert_eq!(m.hd95_mm, Some(hd95(&a, &b, e, s).unwrap()));
        assert_eq!(m.avd_percent, Some(avd(&a, &b).unwrap()));
    }
    let mean = report.classes.iter().map(|c| c.dc_percent).sum::<f64>() / 3.0;
    assert!((report.mean_dc().unwrap() - mean).abs() < 1e-12);
    assert!(report.to_table().contains("WM"));
    assert!(report.to_kv().contains("GM.hd95_mm = "));
}

#[test]
fn class_absent_from_truth_is_reported_as_undefined() {
    let e = [6, 6, 6];
    let truth = labels(e, (0..216).map(|i| if i < 100 { 1 } else { 0 }).collect());
    let report = evaluate_case(&truth, &truth, [1.0; 3]).unwrap();
    let wm = report.get(3).unwrap();
    assert_eq!(wm.dc_percent, 100.0);
    assert_eq!(wm.hd95_mm, None);
    assert_eq!(wm.avd_percent, None);
    assert!(report.to_kv().contains("WM.hd95_mm = undefined"));
    let short = LabelVolume::new([6, 6, 5], [1.0; 3], 4, vec![0; 180]).unwrap();
    assert!(evaluate_case(&short, &truth, [1.0; 3]).is_err());
}

fn mask_strategy() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (any::<u64>()).prop_map(|seed| {
        let mut r = rng(seed);
        (random_mask([8, 9, 7], &mut r), random_mask([8, 9, 7], &mut r))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn metric_symmetries_and_ranges((a, b) in mask_strategy()) {
        let e = [8, 9, 7];
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=100.0).contains(&d));
        let s = [1.0, 2.0, 0.5];
        let h = hd95(&a, &b, e, s).unwrap();
        prop_assert_eq!(h, hd95(&b, &a, e, s).unwrap());
        prop_assert!(h >= 0.0);
        prop_assert_eq!(dice(&a, &a).unwrap(), 100.0);
        prop_assert_eq!(hd95(&a, &a, e, s).unwrap(), 0.0);
        prop_assert_eq!(avd(&a, &a).unwrap(), 0.0);
        prop_assert!(avd(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn hd95_scales_with_isotropic_spacing((a, b) in mask_strategy(), k in prop::sample::select(vec![2.0, 0.5, 4.0])) {
        let e = [8, 9, 7];
        let base = hd95(&a, &b, e, [1.0; 3]).unwrap();
        prop_assert_eq!(hd95(&a, &b, e, [k; 3]).unwrap(), k * base);
        let aniso = [1.0, 0.5, 2.0];
        let scaled = aniso.map(|v| v * k);
        prop_assert_eq!(hd95(&a, &b, e, scaled).unwrap(), k * hd95(&a, &b, e, aniso).unwrap());
    }
}
