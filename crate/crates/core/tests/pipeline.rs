mod common;

use vidlang::eval::{Prediction, Score};
use vidlang::gateway::{BackendEndpoint, Role};
use vidlang::pipeline::{
    read_artifact, rescore_run, run_ablation, run_pipeline, AblationVariant, DropSpec, PipelineError,
};
use vidlang::budget::DropTarget;
use vidlang::BudgetOutcome;

#[test]
fn always_gold_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let out = run_pipeline(&common::config("closed_loop.jsonl", "always-gold", dir.path()), &reg).unwrap();
    assert_eq!(out.report.accuracy_overall, Some(100.0));
    assert_eq!(out.report.miou, Some(100.0));
    assert_eq!(out.verdicts.len(), 20);
    assert_eq!(out.stats.failures, 0);
    for f in ["config.json", "report.jsonl", "summary.txt", "run.json", "videos/kitchen.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn reader_recovers_answers_from_transcripts() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let out = run_pipeline(&common::config("closed_loop.jsonl", "reader", dir.path()), &reg).unwrap();
    let perfect = |s: Score| s == Score::Correct(true) || s == Score::Iou(1.0);
    let wrong: Vec<_> = out.verdicts.iter().filter(|v| !perfect(v.score)).collect();
    assert!(wrong.is_empty(), "{wrong:#?}");
    assert_eq!(out.report.accuracy_by_category["Visual"].total, 5);
    assert_eq!(out.report.accuracy_by_category["Speech"].accuracy, 100.0);

    let a = read_artifact(dir.path(), "kitchen").unwrap();
    let plan = a.plan.unwrap();
    assert_eq!(plan.outcome, BudgetOutcome::Fit);
    assert_eq!(plan.trace.len(), 1);
    assert_eq!(plan.final_clip_length, 1.0);
    let t = a.transcript.unwrap();
    assert!(t.subtitle_block.starts_with("00:00:02 --> 00:00:07: Welcome back"));
    assert_eq!(t.caption_lines().len(), 96);
    assert!(a.questions.iter().any(|q| q.reasoning.is_some()));
}

#[test]
fn resume_makes_no_calls_and_reproduces_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let mut cfg = common::config("closed_loop.jsonl", "reader", dir.path());
    let first = run_pipeline(&cfg, &reg).unwrap();
    let report_before = std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    let calls_before = reg.stats().total_calls();
    assert!(calls_before > 0);

    cfg.resume = true;
    let second = run_pipeline(&cfg, &reg).unwrap();
    assert_eq!(reg.stats().total_calls(), calls_before);
    assert_eq!(second.stats.network_requests, 0);
    assert_eq!(second.stats.resumed_videos, 5);
    assert_eq!(second.verdicts, first.verdicts);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap(), report_before);
}

#[test]
fn resume_redoes_changed_or_partial_work() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let mut cfg = common::config("closed_loop.jsonl", "reader", dir.path());
    run_pipeline(&cfg, &reg).unwrap();
    std::fs::remove_file(dir.path().join("videos/harbor.json")).unwrap();
    cfg.resume = true;
    let out = run_pipeline(&cfg, &reg).unwrap();
    assert_eq!(out.stats.resumed_videos, 4);
    cfg.time_aware = false;
    let out = run_pipeline(&cfg, &reg).unwrap();
    assert_eq!(out.stats.resumed_videos, 0);
}

#[test]
fn identical_runs_give_identical_verdict_records() {
    let reg = common::registry("closed_loop.jsonl");
    let read = |p: &std::path::Path| std::fs::read_to_string(p.join("report.jsonl")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = common::config("closed_loop.jsonl", "reader", a.path());
    run_pipeline(&cfg, &reg).unwrap();
    cfg.output_dir = b.path().into();
    cfg.exec_mode = vidlang::ExecMode::Sequential;
    cfg.max_in_flight = 3;
    run_pipeline(&cfg, &reg).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn fixed_clip_length_has_single_trace_entry() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let mut cfg = common::config("closed_loop.jsonl", "reader", dir.path());
    cfg.fixed_clip_length = Some(8.0);
    let out = run_pipeline(&cfg, &reg).unwrap();
    for v in ["kitchen", "harbor", "workshop", "garden", "station"] {
        let plan = read_artifact(dir.path(), v).unwrap().plan.unwrap();
        assert_eq!(plan.trace.len(), 1, "{v}");
        assert_eq!(plan.trace[0].clip_length, 8.0);
    }
    assert_eq!(out.verdicts.len(), 20);
}

#[test]
fn tight_limits_coarsen_clips() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let mut cfg = common::config("closed_loop.jsonl", "reader", dir.path());
    cfg.context_limit = 1500;
    run_pipeline(&cfg, &reg).unwrap();
    let plan = read_artifact(dir.path(), "garden").unwrap().plan.unwrap();
    assert!(plan.trace.len() > 1);
    assert!(plan.trace.windows(2).all(|w| w[1].clip_length == 2.0 * w[0].clip_length));
    assert!(plan.final_token_count <= 1500);
}

#[test]
fn atr_beats_fixed_coarse_clips_on_short_events() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("fine_visuals.jsonl");
    let base = common::config("fine_visuals.jsonl", "reader", dir.path());
    let variants = ["atr", "fixed=8"].map(|s| AblationVariant::from_spec(&base, s).unwrap());
    let res = run_ablation(&variants, &reg).unwrap();
    assert_eq!(res.rows[0].accuracy, Some(100.0));
    assert_eq!(res.rows[1].accuracy, Some(0.0));
    assert_eq!(res.rows[1].mean_final_clip_length, Some(8.0));
    let table = vidlang::pipeline::ablation_table(&res.rows);
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn backend_failures_become_abstentions() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let mut cfg = common::config("closed_loop.jsonl", "down", dir.path());
    cfg.endpoints.llm.max_retries = 0;
    let out = run_pipeline(&cfg, &reg).unwrap();
    assert_eq!(out.stats.failures, 20);
    assert!(out.over_failure_budget(cfg.max_failures));
    assert!(out.verdicts.iter().all(|v| v.abstained && v.error.is_some()));
    assert_eq!(out.report.accuracy_overall, Some(0.0));

    cfg.endpoints.asr = BackendEndpoint::mock(Role::Asr, "down");
    cfg.endpoints.asr.max_retries = 0;
    let out = run_pipeline(&cfg, &reg).unwrap();
    let a = read_artifact(dir.path(), "station").unwrap();
    assert!(a.error.unwrap().contains("transcription"));
    assert_eq!(out.stats.failures, 20);
}

#[test]
fn context_overflow_triggers_rebudgeting() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let cfg = common::config("closed_loop.jsonl", "overflow", dir.path());
    let out = run_pipeline(&cfg, &reg).unwrap();
    let a = read_artifact(dir.path(), "kitchen").unwrap();
    assert_eq!(a.rebudget_rounds, 2);
    assert_eq!(a.plan.unwrap().context_limit, 64_000 * 3 / 4 * 3 / 4);
    assert!(out.verdicts.iter().all(|v| v.error.as_deref().unwrap().contains("context length")));
}

#[test]
fn config_and_manifest_errors_are_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let mut cfg = common::config("missing.jsonl", "reader", dir.path());
    assert!(matches!(run_pipeline(&cfg, &reg), Err(PipelineError::Manifest(_))));
    cfg = common::config("closed_loop.jsonl", "no-such-profile", dir.path());
    assert!(matches!(run_pipeline(&cfg, &reg), Err(PipelineError::Gateway(_))));
    cfg = common::config("closed_loop.jsonl", "reader", dir.path());
    cfg.drop_spec = Some(DropSpec { target: DropTarget::Captions, rate: 1.5 });
    assert!(matches!(run_pipeline(&cfg, &reg), Err(PipelineError::Config(_))));
}

#[test]
fn rescoring_matches_the_original_run() {
    let dir = tempfile::tempdir().unwrap();
    let reg = common::registry("closed_loop.jsonl");
    let out = run_pipeline(&common::config("closed_loop.jsonl", "reader", dir.path()), &reg).unwrap();
    let again = rescore_run(dir.path()).unwrap();
    assert_eq!(again.verdicts, out.verdicts);
    assert_eq!(again.report, out.report);
    assert!(matches!(rescore_run(&dir.path().join("nope")), Err(PipelineError::MissingRun(_))));
}

#[test]
fn judge_overrides_exact_match() {
    let dir = tempfile::tempdir().unwrap();
    let mut reg = common::registry("closed_loop.jsonl");
    reg.register("yes", |c: &vidlang::gateway::mock::MockCall<'_>| {
        assert!(c.body["messages"][0]["content"].as_str().unwrap().contains("Reference answer"));
        vidlang::gateway::WireResponse::ok(vidlang::gateway::chat_response_body("Yes."))
    });
    let mut cfg = common::config("closed_loop.jsonl", "always-A", dir.path());
    cfg.endpoints.judge = Some(BackendEndpoint::mock(Role::Judge, "yes"));
    let out = run_pipeline(&cfg, &reg).unwrap();
    let open: Vec<_> = out.verdicts.iter().filter(|v| v.question_id == "open").collect();
    assert_eq!(open.len(), 5);
    assert!(open.iter().all(|v| v.predicted == Prediction::Text("A".into()) && v.score.is_correct()));
}
