//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vidctx_core::align::{
    alignment_margin, contrastive_loss_value, grad_check, loglog_slope, rotation_pairs, train_alignment, AlignBatch,
    ProjectionParams, TrainSchedule,
};
use vidctx_core::config::Config;
use vidctx_core::corpus::{build_hierarchies, build_hierarchy, segments_from_records, validate_hierarchy, Modality, ScaleConfig, SegmentRecord};
use vidctx_core::dedup::minimize_redundancy;
use vidctx_core::harness::{evaluate_corpus, generate_corpus, SynthSpec};
use vidctx_core::index::{load_index, save_index, EmbeddingVector, GraphParams, SearchMode, VectorIndex};
use vidctx_core::pipeline::{build_index, QueryEngine};
use vidctx_core::select::{brute_force_select, budget_k_star, knapsack_select, total_value, Item, SelectionMode};
use vidctx_core::textmodel::{mi_from_joint, plugin_mi, token_count};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    if took < limit {
        Ok(())
    } else {
        Err(format!("{what} took {took:.2?}, limit {limit:?}"))
    }
}

fn knapsack_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_gap = f64::NEG_INFINITY;
    for case in 0..200 {
        for unit in [false, true] {
            let n = rng.random_range(1..=15);
            let items: Vec<Item> = (0..n)
                .map(|i| Item {
                    id: format!("s{i:02}"),
                    score: rng.random::<f64>(),
                    length: if unit { 1 } else { rng.random_range(1..=20) },
                })
                .collect();
            let budget = rng.random_range(0..=items.iter().map(|i| i.length).sum::<usize>());
            let greedy = total_value(&items, &knapsack_select(&items, budget));
            let opt = total_value(&items, &brute_force_select(&items, budget).map_err(|e| e.to_string())?);
            let max_item = items.iter().map(|i| i.score).fold(0.0, f64::max);
            if unit && (greedy - opt).abs() > 1e-9 {
                return Err(format!("case {case}: unit lengths greedy {greedy} != opt {opt}"));
            }
            if greedy < opt - max_item - 1e-12 {
                return Err(format!("case {case}: greedy {greedy} < opt {opt} - max {max_item}"));
            }
            worst_gap = worst_gap.max(opt - greedy);
        }
    }
    within(started, Duration::from_secs(10), "oracle comparison")?;
    Ok(format!("200 instances, largest opt-greedy gap {worst_gap:.4}, {:.2?}", started.elapsed()))
}

fn k_star_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let n = rng.random_range(0..40);
        let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..=80)).collect();
        let budget = rng.random_range(0..=1200);
        let k = budget_k_star(&lengths, budget);
        let prefix: usize = lengths[..k].iter().sum();
        if prefix > budget {
            return Err(format!("case {case}: top-{k} uses {prefix} > {budget}"));
        }
        if k < n && prefix + lengths[k] <= budget {
            return Err(format!("case {case}: top-{} still fits {budget}", k + 1));
        }
    }
    Ok("1000 ranked lists".into())
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> AlignBatch {
    let mut v = || (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
    AlignBatch::new((0..b).map(|_| (v(), v())).collect())
}

fn contrastive_floor() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut min_excess = f64::INFINITY;
    for case in 0..100 {
        let b = rng.random_range(1..=16);
        let (d_in, d_out) = (rng.random_range(2..=16), rng.random_range(2..=8));
        let tau = rng.random_range(0.05..2.0);
        let params = ProjectionParams::random(d_in, d_out, case);
        let loss = contrastive_loss_value(&random_batch(&mut rng, b, d_in), &params, tau).map_err(|e| e.to_string())?;
        let floor = b as f64 * std::f64::consts::LN_2;
        if loss < floor - 1e-9 {
            return Err(format!("batch {case}: loss {loss} below floor {floor}"));
        }
        min_excess = min_excess.min(loss - floor);
    }
    for case in 0..10 {
        let params = ProjectionParams::random(6, 4, 100 + case);
        let loss = contrastive_loss_value(&random_batch(&mut rng, 1, 6), &params, 0.3).map_err(|e| e.to_string())?;
        if (loss - std::f64::consts::LN_2).abs() > 1e-9 {
            return Err(format!("single pair loss {loss}"));
        }
    }
    let mut worst = 0.0f64;
    for case in 0..20 {
        let params = ProjectionParams::random(8, 5, 200 + case);
        let b = rng.random_range(2..=6);
        let batch = random_batch(&mut rng, b, 8);
        let r = grad_check(&params, &batch, 0.5, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
    }
    check(worst < 1e-4, format!("min excess over floor {min_excess:.3e}, grad check max rel error {worst:.2e}"))
}

fn convergence() -> Outcome {
    let started = Instant::now();
    let runs: Vec<Result<(f64, f64), String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..5u64)
            .map(|seed| {
                s.spawn(move || {
                    let pairs = rotation_pairs(1024, 32, seed);
                    let schedule = TrainSchedule { seed, ..TrainSchedule::default() };
                    assert_eq!((schedule.steps, schedule.base_eta), (2000, 0.1));
                    let out = train_alignment(&pairs, ProjectionParams::random(32, 32, seed), &schedule).map_err(|e| e.to_string())?;
                    let (pos, neg) = alignment_margin(&out.params, &pairs);
                    let floor = out.batch_size as f64 * std::f64::consts::LN_2;
                    let slope = loglog_slope(&out.losses, floor, 10, out.losses.len()).ok_or("no slope")?;
                    Ok((pos - neg, slope))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect()
    });
    let runs: Vec<(f64, f64)> = runs.into_iter().collect::<Result<_, _>>()?;
    let min_margin = runs.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let mut slopes: Vec<f64> = runs.iter().map(|r| r.1).collect();
    slopes.sort_by(f64::total_cmp);
    let median = slopes[slopes.len() / 2];
    within(started, Duration::from_secs(60), "training")?;
    check(
        min_margin >= 0.3 && (-0.75..=-0.25).contains(&median),
        format!("min margin {min_margin:.3}, median slope {median:.3}, slopes {slopes:.3?}, {:.2?}", started.elapsed()),
    )
}

fn dedup_behaviour() -> Outcome {
    let cfg = Config::default();
    let embedder = cfg.embedder();
    let dcfg = cfg.dedup_config();
    for seed in 0..50 {
        let spec = SynthSpec { duration_s: 90.0, repeat_rate: 0.3 + 0.01 * seed as f64, single_needles: 2, seed, ..Default::default() };
        let segs = segments_from_records(generate_corpus(&spec).map_err(|e| e.to_string())?.records).map_err(|e| e.to_string())?;
        let scores: Vec<f64> = (0..segs.len()).map(|i| ((i * 37 + seed as usize) % 11) as f64).collect();
        let once = minimize_redundancy(&segs, &scores, &embedder, &dcfg);
        let twice = minimize_redundancy(&once.pool, &once.scores, &embedder, &dcfg);
        if twice.pool != once.pool {
            return Err(format!("corpus {seed}: second pass changed the pool"));
        }
    }

    let classes = ["a heron lands on the willow by the river", "the chef stirs garlic into the simmering sauce", "players sprint as the referee blows the whistle"];
    let mut recs = Vec::new();
    for i in 0..30 {
        recs.push(SegmentRecord {
            video_id: "dup".into(),
            level: 1,
            start_s: 3.0 * i as f64,
            end_s: 3.0 * (i + 1) as f64,
            modality: Modality::Visual,
            text: classes[(i * 7) % 3].into(),
            confidence: None,
        });
    }
    let segs = segments_from_records(recs).map_err(|e| e.to_string())?;
    let kept = minimize_redundancy(&segs, &vec![1.0; segs.len()], &embedder, &dcfg);
    let texts: BTreeSet<String> = kept.pool.iter().map(|s| s.raw_text()).collect();
    if kept.pool.len() != 3 || texts.len() != 3 {
        return Err(format!("exact duplicates kept {} segments", kept.pool.len()));
    }

    let spec = SynthSpec { single_needles: 50, seed: 11, ..Default::default() };
    let corpus = generate_corpus(&spec).map_err(|e| e.to_string())?;
    let built = build_index(&segments_from_records(corpus.records).map_err(|e| e.to_string())?, &cfg, None).map_err(|e| e.to_string())?;
    let dropped: BTreeSet<&str> = built.stats.dedup.dropped().into_iter().collect();
    let lost: Vec<&str> = corpus.truth.queries.iter().flat_map(|q| &q.needles).map(|n| n.segment_id.as_str()).filter(|id| dropped.contains(id)).collect();
    check(
        built.stats.indexed < built.stats.hierarchy_segments && lost.is_empty(),
        format!(
            "idempotent on 50 corpora, 3 classes -> 3 kept, synthetic {} -> {} retained, needles lost {}",
            built.stats.hierarchy_segments,
            built.stats.indexed,
            lost.len()
        ),
    )
}

fn hierarchy_invariant() -> Outcome {
    let scale = ScaleConfig::default();
    let specs = [
        SynthSpec { duration_s: 180.0, ..Default::default() },
        SynthSpec { videos: 3, duration_s: 600.0, single_needles: 5, cross_modal_needles: 3, needle_pairs: 2, seed: 4, ..Default::default() },
        SynthSpec { single_needles: 100, seed: 5, ..Default::default() },
        SynthSpec { duration_s: 363.0, repeat_rate: 0.9, seed: 6, ..Default::default() },
    ];
    let mut checked = 0;
    for spec in &specs {
        let segs = segments_from_records(generate_corpus(spec).map_err(|e| e.to_string())?.records).map_err(|e| e.to_string())?;
        for h in build_hierarchies(&segs, &scale).map_err(|e| e.to_string())? {
            let v = validate_hierarchy(&h);
            if !v.is_empty() {
                return Err(format!("{} violations, first {:?}", v.len(), v[0]));
            }
            checked += 1;
        }
    }
    let segs = segments_from_records(generate_corpus(&specs[0]).map_err(|e| e.to_string())?.records).map_err(|e| e.to_string())?;
    let h = build_hierarchy(&segs, &scale).map_err(|e| e.to_string())?;
    let counts = (h.level(1).len(), h.level(2).len(), h.level(3).len());
    check(counts == (60, 6, 1), format!("{checked} hierarchies clean, 180 s ladder {counts:?}"))
}

fn needle_retrieval() -> Outcome {
    let cfg = Config::default();
    assert!(!cfg.approximate);
    let spec = SynthSpec { single_needles: 100, seed: 21, ..Default::default() };
    let corpus = generate_corpus(&spec).map_err(|e| e.to_string())?;
    let (report, stats) = evaluate_corpus(&corpus, &cfg).map_err(|e| e.to_string())?;
    let recall = report.recall_at_k.unwrap_or(0.0);

    let spec = SynthSpec { cross_modal_needles: 100, seed: 22, ..Default::default() };
    let corpus = generate_corpus(&spec).map_err(|e| e.to_string())?;
    let (cross, _) = evaluate_corpus(&corpus, &cfg).map_err(|e| e.to_string())?;
    let both = cross.cross_modal_recall.unwrap_or(0.0);
    let p95 = report.latency.p95_ms.max(cross.latency.p95_ms);
    check(
        stats.micro_segments == 1200 && report.queries == 100 && recall >= 0.95 && p95 < 100.0 && both >= 0.9,
        format!("recall@{} {recall:.2}, cross-modal {both:.2}, p95 {p95:.2} ms", report.k),
    )
}

fn mi_estimator() -> Outcome {
    let mi = mi_from_joint(&[vec![0.4, 0.1], vec![0.1, 0.4]]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coins: Vec<(bool, bool)> = (0..100_000).map(|_| (rng.random(), rng.random())).collect();
    let indep = plugin_mi(&coins);
    check((mi - 0.278).abs() < 0.01 && indep < 0.01, format!("2x2 joint {mi:.4} bits, independent coins {indep:.2e} bits"))
}

fn index_persistence() -> Outcome {
    let dim = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vec = |rng: &mut ChaCha8Rng| EmbeddingVector::from_f64(&(0..dim).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>());
    let mut index = VectorIndex::new(dim);
    for i in 0..10_000 {
        let v = vec(&mut rng);
        index.insert(format!("v{i:05}"), &v, format!("meta {i}").into_bytes()).map_err(|e| e.to_string())?;
    }
    let params = GraphParams::default();
    index.build_graph(params.clone());

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("index.bin");
    let started = Instant::now();
    save_index(&index, &path).map_err(|e| e.to_string())?;
    let loaded = load_index(&path).map_err(|e| e.to_string())?;
    let round_trip = started.elapsed();
    let bytes = index.to_bytes();
    if loaded.to_bytes() != bytes || std::fs::read(&path).map_err(|e| e.to_string())? != bytes {
        return Err("round trip is not bit-exact".into());
    }

    let mut found = 0;
    for _ in 0..100 {
        let q = vec(&mut rng);
        let exact: BTreeSet<String> = loaded.search_with(&q, 10, SearchMode::Exact).map_err(|e| e.to_string())?.into_iter().map(|h| h.id).collect();
        let approx = loaded.search_with(&q, 10, SearchMode::Approximate { ef: params.ef_search }).map_err(|e| e.to_string())?;
        found += approx.iter().filter(|h| exact.contains(&h.id)).count();
    }
    let recall = found as f64 / 1000.0;
    check(recall >= 0.95, format!("10k vectors, {} bytes, round trip {round_trip:.2?}, recall@10 {recall:.3}", bytes.len()))
}

fn budget_safety() -> Outcome {
    let base = Config::default();
    let spec = SynthSpec { videos: 3, duration_s: 900.0, single_needles: 20, cross_modal_needles: 5, needle_pairs: 5, seed: 10, ..Default::default() };
    let corpus = generate_corpus(&spec).map_err(|e| e.to_string())?;
    let segs = segments_from_records(corpus.records.clone()).map_err(|e| e.to_string())?;
    let mut engines = Vec::new();
    for approximate in [false, true] {
        let cfg = Config { approximate, ..base.clone() };
        let built = build_index(&segs, &cfg, None).map_err(|e| e.to_string())?;
        engines.push(QueryEngine::new(built.index, cfg));
    }
    let words: Vec<String> = corpus.records.iter().flat_map(|r| r.text.split_whitespace().map(str::to_string).collect::<Vec<_>>()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let engine = &engines[i % 2];
        let question = if i % 3 == 0 {
            corpus.truth.queries[rng.random_range(0..corpus.truth.queries.len())].query.clone()
        } else {
            (0..rng.random_range(1..12)).map(|_| words[rng.random_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ")
        };
        let cfg = Config {
            budget: rng.random_range(0..=1500),
            k0: rng.random_range(1..=120),
            mode: if rng.random_bool(0.5) { SelectionMode::Rank } else { SelectionMode::Density },
            coherence_tau: if rng.random_bool(0.3) { rng.random_range(0.0..0.9) } else { 0.0 },
            ..engine.config.clone()
        };
        let r = engine.query_with(&question, &cfg).map_err(|e| e.to_string())?;
        let prompt_tokens = token_count(&r.prompt);
        if r.bundle.total_tokens > cfg.budget || prompt_tokens > cfg.budget {
            return Err(format!("query {i}: {} tokens over budget {}", r.bundle.total_tokens, cfg.budget));
        }
        if cfg.budget > 0 {
            worst = worst.max(prompt_tokens as f64 / cfg.budget as f64);
        }
    }
    Ok(format!("1000 queries, max budget use {:.1}%", worst * 100.0))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("knapsack oracle equivalence", knapsack_oracle),
        ("k* contract", k_star_contract),
        ("contrastive loss floor and gradients", contrastive_floor),
        ("convergence-rate consistency", convergence),
        ("dedup idempotence, collapse and needle retention", dedup_behaviour),
        ("hierarchy invariant", hierarchy_invariant),
        ("needle retrieval", needle_retrieval),
        ("MI estimator", mi_estimator),
        ("index persistence and approximate recall", index_persistence),
        ("budget safety", budget_safety),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let label = format!("{} {name}", n + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {label}: {detail} [{:.2?}]", started.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {label}: {detail} [{:.2?}]", started.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
