mod common;

use common::*;
use contingen_core::contingency::*;
use contingen_core::dataset::*;
use contingen_core::*;

fn ieee6_table(jobs: usize) -> RankingTable {
    let case = cases::ieee6();
    let sched = transfer_schedule(&case, 2.5).unwrap();
    rank_all_jobs(&case, &sched, &CpfOptions::default(), jobs).unwrap()
}

#[test]
fn ieee6_ranking_snapshot() {
    let t = ieee6_table(1);
    assert_eq!(t.m(), 11);
    assert!(t.unconverged.is_empty());
    let got: Vec<(usize, u32, u32, usize)> = t
        .rows
        .iter()
        .map(|r| (r.outage.branch_index, r.outage.from, r.outage.to, r.rank))
        .collect();
    assert_eq!(got, IEEE6_ORDER.to_vec());
    for (r, m) in t.rows.iter().zip(IEEE6_MARGINS) {
        assert!((r.max_lambda - m).abs() < 1e-6, "{} vs {m}", r.max_lambda);
    }
}

#[test]
fn ranking_is_reproducible_and_job_independent() {
    let first = ieee6_table(1);
    for _ in 0..2 {
        assert_eq!(ieee6_table(1), first);
    }
    assert_eq!(ieee6_table(8), first);
    assert_eq!(first.to_csv(), ieee6_table(8).to_csv());
}

#[test]
fn ranks_are_competition_ranks_over_sorted_margins() {
    for case in [cases::ieee14(), cases::ieee30()] {
        let sched = transfer_schedule(&case, 2.5).unwrap();
        let t = rank_all_jobs(&case, &sched, &CpfOptions::default(), 4).unwrap();
        assert_eq!(t.m() + t.unconverged.len(), enumerate_n1(&case).len());
        assert_eq!(t.rows[0].rank, 1);
        for (k, w) in t.rows.windows(2).enumerate() {
            assert!(w[0].max_lambda <= w[1].max_lambda);
            if w[1].rank != w[0].rank {
                assert_eq!(w[1].rank, k + 2);
            }
        }
        for r in &t.rows {
            assert_eq!(rank_of(&r.outage, &t).unwrap(), r.rank);
        }
    }
}

#[test]
fn heavier_base_load_lowers_every_margin() {
    let case = cases::ieee6();
    let heavy = scale_loads(&case, &vec![1.2; case.n_buses()]);
    let opts = CpfOptions::default();
    let light = rank_all(&case, &transfer_schedule(&case, 2.5).unwrap(), &opts).unwrap();
    let loaded = rank_all(&heavy, &transfer_schedule(&heavy, 2.5).unwrap(), &opts).unwrap();
    for r in &light.rows {
        let h = loaded
            .rows
            .iter()
            .find(|x| x.outage == r.outage)
            .unwrap();
        assert!(h.max_lambda < r.max_lambda, "{:?}", r.outage);
    }
}

#[test]
fn ranking_invariant_under_bus_permutation() {
    let case = cases::ieee14();
    let mut permuted = case.clone();
    permuted.buses.reverse();
    permuted.buses.rotate_left(3);
    let opts = CpfOptions::default();
    let a = rank_all(&case, &transfer_schedule(&case, 2.5).unwrap(), &opts).unwrap();
    let b = rank_all(&permuted, &transfer_schedule(&permuted, 2.5).unwrap(), &opts).unwrap();
    assert_eq!(a.m(), b.m());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.outage, y.outage);
        assert_eq!(x.rank, y.rank);
        assert!((x.max_lambda - y.max_lambda).abs() < 1e-6);
    }
}

#[test]
fn outage_margins_agree_with_sweep_for_random_outages() {
    let mut rng = rng(5);
    for case in [cases::ieee6(), cases::ieee14(), cases::ieee30()] {
        let sched = transfer_schedule(&case, 2.5).unwrap();
        let feasible = enumerate_n1(&case);
        for _ in 0..3 {
            use rand::Rng;
            let o = feasible[rng.gen_range(0..feasible.len())];
            let cut = apply_outage(&case, o.branch_index).unwrap();
            let cpf = run_cpf(&cut, &sched, &CpfOptions::default()).unwrap();
            let sweep = sweep_max_lambda(&cut, &sched, 1e-3);
            assert!(((cpf.max_lambda - sweep) / sweep).abs() < 0.01, "{o:?}");
        }
    }
}

#[test]
fn load_factor_draws_are_centred() {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = rng(42);
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let f = load_factor(rng.sample(StandardNormal));
        assert!((0.5..=1.5).contains(&f));
        sum += f;
    }
    assert!((sum / n as f64 - 1.0).abs() < 0.005);
}

#[test]
fn forced_attempt_matches_direct_continuation() {
    let case = cases::ieee6();
    let mut r = rng(8);
    let perturbed = perturb_loads(&case, &mut r);
    let opts = CpfOptions::default();
    let Attempt::Sample(s) = evaluate_outage(&perturbed, 4, 2.5, &opts, 77) else {
        panic!("attempt discarded");
    };
    let sched = transfer_schedule(&perturbed, 2.5).unwrap();
    let trace = run_cpf(&apply_outage(&perturbed, 4).unwrap(), &sched, &opts).unwrap();
    assert_eq!(s.max_lambda, trace.max_lambda);
    assert_eq!(s.outage, OutageId::of(&case, 4));
    assert_eq!(s.seed, 77);
    for i in 0..case.n_buses() {
        assert_eq!(s.base_p[i], perturbed.buses[i].pd);
        let want = perturbed.buses[i].pd * (1.0 + 1.5 * trace.max_lambda);
        assert!((s.crit_p[i] - want).abs() < 1e-9);
        if s.base_q[i] >= 0.0 {
            assert!(s.crit_q[i] >= s.base_q[i]);
        }
    }
}

#[test]
fn keeps_lowest_tenth_of_converged_attempts() {
    let case = cases::ieee6();
    let ds = generate_dataset(&case, 100, 2.5, 3, &CpfOptions::default(), 1).unwrap();
    assert_eq!(ds.attempts, 100);
    assert_eq!(ds.converged, 100);
    assert_eq!(ds.samples.len(), 10);
    let cut = ds.rejected_min_lambda.unwrap();
    assert!(ds.samples.iter().all(|s| s.max_lambda <= cut));
    assert!(ds.samples.windows(2).all(|w| w[0].max_lambda <= w[1].max_lambda));
}

#[test]
fn kept_samples_are_replayable_from_their_seed() {
    let case = cases::ieee14();
    let opts = CpfOptions::default();
    let ds = generate_dataset(&case, 60, 2.5, 11, &opts, 1).unwrap();
    for s in &ds.samples {
        assert_eq!(generate_sample(&case, 2.5, &opts, s.seed), Attempt::Sample(s.clone()));
    }
}

#[test]
fn dataset_is_deterministic_across_jobs() {
    let case = cases::ieee14();
    let opts = CpfOptions::default();
    let a = generate_dataset(&case, 200, 2.5, 4, &opts, 1).unwrap();
    let b = generate_dataset(&case, 200, 2.5, 4, &opts, 1).unwrap();
    let c = generate_dataset(&case, 200, 2.5, 4, &opts, 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    let d = generate_dataset(&case, 200, 2.5, 5, &opts, 1).unwrap();
    assert_ne!(a.samples, d.samples);
}

#[test]
fn too_few_attempts_rejected() {
    let case = cases::ieee6();
    assert!(matches!(
        generate_dataset(&case, 5, 2.5, 0, &CpfOptions::default(), 1),
        Err(DatasetError::TooFewAttempts(5))
    ));
}

#[test]
fn jsonl_round_trip() {
    let case = cases::ieee6();
    let ds = generate_dataset(&case, 50, 2.5, 1, &CpfOptions::default(), 1).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &ds.samples).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), ds.samples.len());
    let back = read_jsonl(buf.as_slice()).unwrap();
    assert_eq!(back, ds.samples);
}

fn encoded_ieee14() -> (GridEncoder, Vec<ContingencySample>) {
    let case = cases::ieee14();
    let ds = generate_dataset(&case, 300, 2.5, 2, &CpfOptions::default(), 1).unwrap();
    (GridEncoder::new(&case, Normalizer::fit(&ds.samples)), ds.samples)
}

#[test]
fn encode_decode_round_trip() {
    let (enc, samples) = encoded_ieee14();
    for s in &samples {
        let d = enc.decode(&enc.encode(s)).unwrap();
        assert_eq!(d.outage, s.outage);
        assert_eq!(d.removed_by_threshold, vec![s.outage.pair()]);
        for i in 0..enc.n() {
            assert!((d.base_p[i] - s.base_p[i]).abs() < 1e-9);
            assert!((d.base_q[i] - s.base_q[i]).abs() < 1e-9);
            assert!((d.crit_p[i] - s.crit_p[i]).abs() < 1e-9);
            assert!((d.crit_q[i] - s.crit_q[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn normalized_channels_span_unit_interval() {
    let (enc, samples) = encoded_ieee14();
    for c in [0usize, 1, 3, 4] {
        let values: Vec<f64> = samples
            .iter()
            .flat_map(|s| {
                let img = enc.encode(s);
                (0..enc.n()).map(move |i| img.get(c, i, i))
            })
            .collect();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12, "channel {c}: {lo} {hi}");
    }
}

#[test]
fn channel_layout_invariants() {
    let (enc, samples) = encoded_ieee14();
    let n = enc.n();
    for s in samples.iter().take(5) {
        let img = enc.encode(s);
        for i in 0..n {
            for j in 0..n {
                for c in [0usize, 1, 3, 4] {
                    if i != j {
                        assert_eq!(img.get(c, i, j), 0.0);
                    }
                }
                assert_eq!(img.get(2, i, j), img.get(2, j, i));
                assert_eq!(img.get(5, i, j), img.get(5, j, i));
                assert!(img.get(5, i, j) <= img.get(2, i, j));
            }
        }
        let ones = |c: usize| img.channel(c).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones(2), ones(5) + 2);
        let base = enc.encode_base(&s.base_p, &s.base_q);
        for c in 0..3 {
            assert_eq!(base.channel(c), img.channel(c));
        }
        assert!(base.channel(3).iter().chain(base.channel(5)).all(|&v| v == 0.0));
    }
}

#[test]
fn decode_rejects_wrong_size() {
    let (enc, samples) = encoded_ieee14();
    let mut img = enc.encode(&samples[0]);
    img.n = 13;
    assert!(matches!(enc.decode(&img), Err(DatasetError::Dimension { .. })));
}

/// (branch index, from, to, rank) in ascending margin order.
const IEEE6_ORDER: [(usize, u32, u32, usize); 11] = [
    (4, 2, 4, 1),
    (8, 3, 6, 2),
    (0, 1, 2, 3),
    (1, 1, 4, 4),
    (2, 1, 5, 5),
    (7, 3, 5, 6),
    (5, 2, 5, 7),
    (6, 2, 6, 8),
    (3, 2, 3, 9),
    (10, 5, 6, 10),
    (9, 4, 5, 11),
];
const IEEE6_MARGINS: [f64; 11] = [
    0.5532349581,
    0.5723112822,
    0.7912963248,
    0.8126871235,
    0.9281806625,
    1.0116010886,
    1.0134587123,
    1.1082537068,
    1.1823689202,
    1.1915693737,
    1.2234819098,
];
