mod common;

use std::collections::BTreeSet;

use langunits::perturb::{shuffle_sentence, strip_diacritics};
use langunits::probe::{cv_r2, fit_ridge_univariate, load_typology, Centering, ProbeParams, ProbingDesign};
use langunits::selection::{lape_entropy, sae_gates_pass, sae_members, SelectionConfig};
use langunits::setlab::{jaccard, partition};
use langunits::stats::{paired_ttest, sample_control, student_t_two_sided_p, ControlPool};
use langunits::{UnitId, UnitKind};
use proptest::prelude::*;

fn unit_set(ids: &[u32]) -> BTreeSet<UnitId> {
    ids.iter().map(|&i| UnitId::new(i / 16, i % 16, UnitKind::Raw)).collect()
}

proptest! {
    #[test]
    fn entropy_bounded_by_log_support(probs in prop::collection::vec(0.0f64..1.0, 2..16)) {
        let h = lape_entropy(&probs);
        let support = probs.iter().filter(|&&p| p > 0.0).count();
        if support == 0 {
            prop_assert!(h.is_infinite());
        } else {
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (support as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn entropy_scale_and_permutation_invariant(
        probs in prop::collection::vec(0.001f64..1.0, 2..16),
        scale in 1e-3f64..1e3,
        rot in 0usize..16,
    ) {
        let h = lape_entropy(&probs);
        let scaled: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        prop_assert!((lape_entropy(&scaled) - h).abs() < 1e-12);
        let mut rotated = probs.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        prop_assert!((lape_entropy(&rotated) - h).abs() < 1e-12);
    }

    #[test]
    fn sae_gates_monotone(
        er in prop::collection::vec(0.0f64..1.0, 3),
        tr in prop::collection::vec(0.0f64..1.0, 3),
        bump in 0.0f64..0.5,
        lang in 0usize..3,
    ) {
        let cfg = SelectionConfig::default();
        let before = sae_gates_pass(&er, &tr, &cfg);
        let mut er2 = er.clone();
        let mut tr2 = tr.clone();
        er2[lang] = (er2[lang] + bump).min(1.0);
        tr2[lang] = (tr2[lang] + bump).min(1.0);
        prop_assert!(!before || sae_gates_pass(&er2, &tr2, &cfg));
    }

    #[test]
    fn sae_members_contain_argmax(probs in prop::collection::vec(0.0f64..1.0, 1..10), ratio in 0.01f64..1.0) {
        let m = sae_members(&probs, ratio);
        let max = probs.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            let arg = probs.iter().position(|&p| p == max).unwrap();
            prop_assert!(m.contains(&arg));
            prop_assert!(m.iter().all(|&k| probs[k] >= ratio * max));
        } else {
            prop_assert!(m.is_empty());
        }
    }

    #[test]
    fn jaccard_symmetric_and_bounded(
        a in prop::collection::vec(0u32..64, 0..30),
        b in prop::collection::vec(0u32..64, 0..30),
    ) {
        let (a, b) = (unit_set(&a), unit_set(&b));
        let j = jaccard(&a, &b);
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert!((0.0..=1.0).contains(&j));
        if !a.is_empty() {
            prop_assert_eq!(jaccard(&a, &a), 1.0);
        }
    }

    #[test]
    fn jaccard_grows_when_adding_shared_units(
        a in prop::collection::vec(0u32..64, 1..30),
        b in prop::collection::vec(0u32..64, 1..30),
        extra in 64u32..128,
    ) {
        let (mut a, mut b) = (unit_set(&a), unit_set(&b));
        let before = jaccard(&a, &b);
        let u = UnitId::new(extra / 16, extra % 16, UnitKind::Raw);
        a.insert(u);
        b.insert(u);
        prop_assert!(jaccard(&a, &b) >= before);
    }

    #[test]
    fn partition_is_complete_and_disjoint(
        a in prop::collection::vec(0u32..64, 0..30),
        b in prop::collection::vec(0u32..64, 0..30),
    ) {
        let (a, b) = (unit_set(&a), unit_set(&b));
        let p = partition(&a, &b, ("a", "b")).unwrap();
        let a2: BTreeSet<_> = p.only_a.union(&p.overlap).copied().collect();
        let b2: BTreeSet<_> = p.only_b.union(&p.overlap).copied().collect();
        prop_assert_eq!(a2, a);
        prop_assert_eq!(b2, b);
        prop_assert!(p.only_a.is_disjoint(&p.only_b));
        prop_assert!(p.only_a.is_disjoint(&p.overlap));
        prop_assert!(p.only_b.is_disjoint(&p.overlap));
    }

    #[test]
    fn ridge_beta_shrinks_with_lambda(
        pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20),
        l1 in 0.0f64..10.0,
        dl in 0.0f64..10.0,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let small = fit_ridge_univariate(&x, &y, l1, Centering::TrainFold);
        let large = fit_ridge_univariate(&x, &y, l1 + dl, Centering::TrainFold);
        if let (Some(s), Some(l)) = (small, large) {
            prop_assert!(l.beta.abs() <= s.beta.abs() + 1e-15);
        }
    }

    #[test]
    fn ttest_antisymmetric_and_shift_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..40),
        shift in -100.0f64..100.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = paired_ttest(&a, &b).unwrap();
        let ba = paired_ttest(&b, &a).unwrap();
        prop_assert_eq!(ab.t_stat, -ba.t_stat);
        prop_assert_eq!(ab.p_value, ba.p_value);
        let a2: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + shift).collect();
        let s = paired_ttest(&a2, &b2).unwrap();
        if ab.degenerate.is_none() && s.degenerate.is_none() {
            prop_assert!((s.t_stat - ab.t_stat).abs() <= 1e-6 * ab.t_stat.abs().max(1.0));
            prop_assert!((s.p_value - ab.p_value).abs() <= 1e-6);
        }
    }

    #[test]
    fn p_value_decreases_in_abs_t(t1 in 0.0f64..20.0, dt in 0.0f64..20.0, dof in 1usize..200) {
        let p1 = student_t_two_sided_p(t1, dof as f64);
        let p2 = student_t_two_sided_p(t1 + dt, dof as f64);
        prop_assert!(p2 <= p1 + 1e-15);
        prop_assert!((0.0..=1.0).contains(&p1));
        prop_assert_eq!(student_t_two_sided_p(-t1, dof as f64), p1);
    }

    #[test]
    fn controls_are_disjoint_sized_and_seeded(
        target in prop::collection::vec(0u32..64, 0..20),
        seed in any::<u64>(),
    ) {
        let pool = unit_set(&(0..64).collect::<Vec<_>>());
        let target = unit_set(&target);
        let c = sample_control(&pool, &target, seed, ControlPool::ExcludeTarget).unwrap();
        prop_assert_eq!(c.len(), target.len());
        prop_assert!(c.is_disjoint(&target));
        prop_assert!(c.is_subset(&pool));
        prop_assert_eq!(c, sample_control(&pool, &target, seed, ControlPool::ExcludeTarget).unwrap());
    }

    #[test]
    fn shuffle_preserves_words(words in prop::collection::vec("[a-zé,.]{1,6}", 0..12), seed in any::<u64>()) {
        let s = words.join(" ");
        let out = shuffle_sentence(&s, seed);
        let mut a: Vec<&str> = s.split_whitespace().collect();
        let mut b: Vec<&str> = out.split_whitespace().collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(out.clone(), shuffle_sentence(&s, seed));
    }

    #[test]
    fn strip_is_idempotent(s in "\\PC{0,40}") {
        let once = strip_diacritics(&s);
        prop_assert_eq!(strip_diacritics(&once), once);
    }
}

#[test]
fn cv_r2_independent_of_block_size_and_threads() {
    let k = 12;
    let mut g = common::Gen::new(4);
    let units: Vec<UnitId> = (0..150).map(|i| UnitId::new(i / 50, i % 50, UnitKind::Sae)).collect();
    let acts: Vec<f64> = (0..k * units.len()).map(|_| g.normal()).collect();
    let typ = load_typology(common::typology_csv(k, 9).as_bytes(), &common::langs(k)).unwrap().matrix;
    let run = |block: usize, threads: usize| {
        let mut p = ProbeParams::new(0.5, 4, 3);
        p.block_size = block;
        let d = ProbingDesign::new(common::langs(k), units.clone(), acts.clone(), p).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cv_r2(&d, &typ).unwrap())
    };
    let base = run(1, 1);
    for (block, threads) in [(7, 1), (64, 4), (1000, 3)] {
        let r = run(block, threads);
        assert!(r.r2.values.iter().zip(&base.r2.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(r.defined_folds, base.defined_folds);
    }
}

#[test]
fn family_hierarchy_fixture() {
    // fam features track the activation exactly; phonology is unrelated noise.
    let k = 12;
    let langs = common::langs(k);
    let mut g = common::Gen::new(17);
    let x: Vec<f64> = (0..k).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 } + 0.01 * g.normal()).collect();
    let mut csv = String::from("lang,fam_a,phonology_b\n");
    for (i, l) in langs.iter().enumerate() {
        let fam = if i % 3 == 0 { 1 } else { 0 };
        csv.push_str(&format!("{l},{fam},{}\n", g.below(2)));
    }
    let typ = load_typology(csv.as_bytes(), &langs).unwrap().matrix;
    let units = vec![UnitId::new(0, 0, UnitKind::Sae)];
    let d = ProbingDesign::new(langs, units.clone(), x, ProbeParams::new(0.01, 4, 1)).unwrap();
    let r = cv_r2(&d, &typ).unwrap();
    let s = langunits::probe::familywise_summary(&r, &units.into_iter().collect()).unwrap();
    let fam = s.iter().find(|f| f.family.as_str() == "fam").unwrap().mean_max_r2;
    let phon = s.iter().find(|f| f.family.as_str() == "phonology").unwrap().mean_max_r2;
    assert!(fam > 0.9, "fam {fam}");
    assert!(fam > phon, "fam {fam} phonology {phon}");
}

#[test]
fn selection_json_round_trips() {
    let mut g = common::Gen::new(2);
    for i in 0..50 {
        let r = common::random_selection(&mut g, &format!("c{i}"), 4, 3, 20, 0.1);
        let back = langunits::SelectionResult::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
