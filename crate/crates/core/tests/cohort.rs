//! Cohort layer: filters, histograms, lasso geometry, representatives.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_core::cohort::{
    filter_cohort, histogram, lasso_select, representative, Clause, FilterPredicate, GroupRegistry, Provenance,
    RepresentativeMethod,
};
use xmodal_core::latent::{LatentSource, LatentTable};
use xmodal_core::synth::{generate_cohort, Covariate, Modality, Sex, Split};
use xmodal_core::tsne::{Embedding2D, TsneConfig};

fn embedding(points: Vec<[f64; 2]>) -> Embedding2D {
    Embedding2D {
        ids: (0..points.len() as u64).collect(),
        points,
        source: None,
        config: TsneConfig::default(),
        kl_final: 0.0,
        kl_trace: Vec::new(),
    }
}

/// Even–odd membership with an upward ray in exact integer arithmetic;
/// boundary points are inside.
fn oracle_inside(p: (i64, i64), poly: &[(i64, i64)]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross == 0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1) {
            return true;
        }
    }
    let mut crossings = 0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        // Edge straddles the vertical line x = p.x (half-open in x).
        if (a.0 > p.0) != (b.0 > p.0) {
            // Sign of (y_edge(p.x) - p.y), scaled by (b.x - a.x).
            let num = (a.1 - p.1) * (b.0 - a.0) + (b.1 - a.1) * (p.0 - a.0);
            let above = if b.0 > a.0 { num > 0 } else { num < 0 };
            if above {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

fn check_lasso(poly: &[(i64, i64)], points: &[(i64, i64)]) {
    let emb = embedding(points.iter().map(|&(x, y)| [x as f64, y as f64]).collect());
    let polygon: Vec<[f64; 2]> = poly.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
    let got = lasso_select(&emb, &polygon).unwrap();
    let expected: Vec<u64> = points
        .iter()
        .enumerate()
        .filter(|(_, &p)| oracle_inside(p, poly))
        .map(|(i, _)| i as u64)
        .collect();
    assert_eq!(got, expected, "polygon {poly:?}");
}

#[test]
fn lasso_matches_brute_force_oracle_on_1000_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let k = rng.random_range(3..=10);
        let poly: Vec<(i64, i64)> = (0..k).map(|_| (rng.random_range(-20..=20), rng.random_range(-20..=20))).collect();
        let points: Vec<(i64, i64)> = (0..40).map(|_| (rng.random_range(-25..=25), rng.random_range(-25..=25))).collect();
        check_lasso(&poly, &points);
    }
}

#[test]
fn concave_star_over_a_grid() {
    let star = [(2, -2), (3, 1), (6, 2), (3, 3), (2, 6), (1, 3), (-2, 2), (1, 1)];
    let grid: Vec<(i64, i64)> = (0..5).flat_map(|x| (0..5).map(move |y| (x, y))).collect();
    check_lasso(&star, &grid);
    let emb = embedding(grid.iter().map(|&(x, y)| [x as f64, y as f64]).collect());
    let polygon: Vec<[f64; 2]> = star.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
    let inside = lasso_select(&emb, &polygon).unwrap();
    // The notch between the arms excludes (0, 0) but the core keeps (2, 2).
    assert!(inside.contains(&12));
    assert!(!inside.contains(&0));
}

#[test]
fn degenerate_and_superset_polygons() {
    let grid: Vec<[f64; 2]> = (0..5).flat_map(|x| (0..5).map(move |y| [x as f64, y as f64])).collect();
    let emb = embedding(grid.clone());
    let segment = [[0.0, 0.0], [4.0, 4.0], [0.0, 0.0]];
    let on_diagonal: Vec<u64> = (0..5).map(|i| (i * 5 + i) as u64).collect();
    assert_eq!(lasso_select(&emb, &segment).unwrap(), on_diagonal);
    let bbox = [[-1.0, -1.0], [5.0, -1.0], [5.0, 5.0], [-1.0, 5.0]];
    assert_eq!(lasso_select(&emb, &bbox).unwrap(), (0..25).collect::<Vec<u64>>());
    assert!(lasso_select(&emb, &[[0.0, 0.0], [1.0, 1.0]]).is_err());
}

proptest! {
    #[test]
    fn lasso_is_translation_invariant(
        poly in prop::collection::vec((-30i64..30, -30i64..30), 3..9),
        points in prop::collection::vec((-35i64..35, -35i64..35), 1..30),
        dx in -1000i64..1000,
        dy in -1000i64..1000,
    ) {
        let to_f = |v: &[(i64, i64)], ox: i64, oy: i64| -> Vec<[f64; 2]> {
            v.iter().map(|&(x, y)| [(x + ox) as f64, (y + oy) as f64]).collect()
        };
        let a = lasso_select(&embedding(to_f(&points, 0, 0)), &to_f(&poly, 0, 0)).unwrap();
        let b = lasso_select(&embedding(to_f(&points, dx, dy)), &to_f(&poly, dx, dy)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn filter_matches_linear_scan() {
    let ds = generate_cohort(2000, 7).unwrap();
    let p = FilterPredicate::new(vec![Clause::categories(Covariate::DiabetesType2, &["true"])]).unwrap();
    let expected: Vec<u64> = ds.subjects.iter().filter(|s| s.covariates.diabetes_type2).map(|s| s.id).collect();
    assert_eq!(filter_cohort(&ds, &p), expected);

    let p = FilterPredicate::new(vec![
        Clause::categories(Covariate::Sex, &["female"]),
        Clause::interval(Covariate::Age, 50.0, 60.0),
        Clause::categories(Covariate::Hypertension, &["true", "false"]),
    ])
    .unwrap();
    let expected: Vec<u64> = ds
        .subjects
        .iter()
        .filter(|s| s.covariates.sex == Sex::Female && (50.0..=60.0).contains(&(s.covariates.age as f64)))
        .map(|s| s.id)
        .collect();
    assert_eq!(filter_cohort(&ds, &p), expected);
    assert_eq!(filter_cohort(&ds, &FilterPredicate::default()), ds.ids());
}

#[test]
fn hypertension_bar_reflects_prevalence() {
    let ds = generate_cohort(2000, 7).unwrap();
    let h = histogram(&ds, &[]).unwrap();
    let bar = h.covariates.iter().find(|c| c.covariate == Covariate::Hypertension).unwrap();
    let share = bar.all[1] as f64 / 2000.0;
    let sd = (0.3073f64 * 0.6927 / 2000.0).sqrt();
    assert!((share - 0.3073).abs() < 4.0 * sd, "share {share}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filtered_histograms_re_sum_to_the_selection(
        lo in 40.0f64..80.0,
        width in 0.0f64..20.0,
        female in any::<bool>(),
    ) {
        let ds = generate_cohort(300, 5).unwrap();
        let sex = if female { "female" } else { "male" };
        let p = FilterPredicate::new(vec![
            Clause::interval(Covariate::Age, lo, lo + width),
            Clause::categories(Covariate::Sex, &[sex]),
        ]).unwrap();
        let selection = filter_cohort(&ds, &p);
        let h = histogram(&ds, &selection).unwrap();
        prop_assert_eq!(h.selected, selection.len());
        for c in &h.covariates {
            prop_assert_eq!(c.selected.iter().sum::<usize>(), selection.len());
            prop_assert_eq!(c.all.iter().sum::<usize>(), 300);
            for (s, a) in c.selected.iter().zip(&c.all) {
                prop_assert!(s <= a);
            }
        }
    }
}

fn table(rows: &[Vec<f32>]) -> LatentTable {
    let splits = vec![Split::Train; rows.len()];
    LatentTable::from_latents(rows, rows, &splits).unwrap()
}

const METHODS: [RepresentativeMethod; 4] = [
    RepresentativeMethod::NearestSubject,
    RepresentativeMethod::Mean,
    RepresentativeMethod::Median,
    RepresentativeMethod::Centroid,
];

#[test]
fn singleton_representative_is_the_member() {
    let t = table(&[vec![0.5, -1.0, 2.0], vec![3.0, 1.0, 0.25]]);
    for m in METHODS {
        let (z, _) = representative(&t, &[1], m, LatentSource::Ecg).unwrap();
        assert_eq!(z.values, vec![3.0, 1.0, 0.25], "{m:?}");
    }
    let (_, id) = representative(&t, &[1], RepresentativeMethod::NearestSubject, LatentSource::Ecg).unwrap();
    assert_eq!(id, Some(1));
    assert!(representative(&t, &[], RepresentativeMethod::Mean, LatentSource::Ecg).is_err());
}

#[test]
fn opposite_pair_has_zero_mean_and_ties_pick_smallest_id() {
    let t = table(&[vec![1.5, -2.0], vec![-1.5, 2.0], vec![7.0, 7.0]]);
    let (z, id) = representative(&t, &[0, 1], RepresentativeMethod::Mean, LatentSource::Mri).unwrap();
    assert_eq!(z.values, vec![0.0, 0.0]);
    assert_eq!(id, None);
    let (z, id) = representative(&t, &[1, 0], RepresentativeMethod::NearestSubject, LatentSource::Mri).unwrap();
    assert_eq!(id, Some(0));
    assert_eq!(z.values, vec![1.5, -2.0]);
}

#[test]
fn median_of_three_matches_sort() {
    let t = table(&[vec![3.0, -1.0], vec![1.0, 5.0], vec![2.0, 0.0]]);
    let (z, _) = representative(&t, &[0, 1, 2], RepresentativeMethod::Median, LatentSource::Ecg).unwrap();
    assert_eq!(z.values, vec![2.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn representatives_obey_their_oracles(
        rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 4), 1..12),
    ) {
        let t = table(&rows);
        let ids: Vec<u64> = (0..rows.len() as u64).collect();
        let (mean, _) = representative(&t, &ids, RepresentativeMethod::Mean, LatentSource::Ecg).unwrap();
        let (centroid, _) = representative(&t, &ids, RepresentativeMethod::Centroid, LatentSource::Ecg).unwrap();
        prop_assert_eq!(&mean.values, &centroid.values);
        let (median, _) = representative(&t, &ids, RepresentativeMethod::Median, LatentSource::Ecg).unwrap();
        for k in 0..4 {
            let mut col: Vec<f32> = rows.iter().map(|r| r[k]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert!(mean.values[k] >= col[0] && mean.values[k] <= *col.last().unwrap());
            prop_assert_eq!(median.values[k], col[(col.len() - 1) / 2]);
        }
        let (near, id) = representative(&t, &ids, RepresentativeMethod::NearestSubject, LatentSource::Ecg).unwrap();
        let id = id.unwrap() as usize;
        prop_assert_eq!(&near.values, &rows[id]);
        let c: Vec<f64> = (0..4).map(|k| rows.iter().map(|r| r[k] as f64).sum::<f64>() / rows.len() as f64).collect();
        let dist = |r: &[f32]| r.iter().zip(&c).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>();
        for (j, r) in rows.iter().enumerate() {
            prop_assert!(dist(r) > dist(&rows[id]) || (dist(r) == dist(&rows[id]) && j >= id));
        }
    }
}

#[test]
fn exported_groups_have_the_documented_shape() {
    let ds = generate_cohort(50, 1).unwrap();
    let mut reg = GroupRegistry::new();
    let p = FilterPredicate::new(vec![Clause::categories(Covariate::Sex, &["male"])]).unwrap();
    let ids = filter_cohort(&ds, &p);
    reg.create("men", &ids, Provenance::Filter { predicate: p }, ds.len()).unwrap();
    reg.create(
        "lasso",
        &[1, 2],
        Provenance::Lasso {
            modality: Modality::Mri,
            polygon: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        },
        ds.len(),
    )
    .unwrap();
    let json: serde_json::Value = serde_json::from_str(&reg.export_json().unwrap()).unwrap();
    let first = &json[0];
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["id", "name", "provenance", "subject_ids"]);
    assert_eq!(first["provenance"]["kind"], "filter");
    assert_eq!(json[1]["provenance"]["modality"], "mri");
    let back = GroupRegistry::import_json(&reg.export_json().unwrap(), ds.len()).unwrap();
    assert_eq!(back, reg);
}
