mod common;

use common::{fuzz_records, toks, FUZZ_VOCAB as VOCAB};
use mars_lab::cli::run_cli;
use mars_lab::engine::decode_recorded;
use mars_lab::trace::{
    read_trace, read_trace_from, replay_verify, write_trace, write_trace_to, TraceFile,
    TraceHeader, TraceRecord,
};
use mars_lab::{
    CostModel, DecodeConfig, PerturbedDraft, PerturbedDraftConfig, SyntheticTarget,
    SyntheticTargetConfig, VerificationPolicy,
};

fn field_diffs(a: &TraceRecord, b: &TraceRecord) -> usize {
    let floats = |r: &TraceRecord| -> Vec<(u32, u64)> {
        r.top_k.iter().map(|(t, z)| (t.0, z.to_bits())).collect()
    };
    [
        a.step != b.step,
        a.context_hash != b.context_hash,
        floats(a) != floats(b),
        a.chosen_draft != b.chosen_draft,
        a.temperature.to_bits() != b.temperature.to_bits(),
    ]
    .iter()
    .filter(|d| **d)
    .count()
}

#[test]
fn fuzzed_trace_round_trips_bit_exactly() {
    let records = fuzz_records(11, 10_000);
    let header = TraceHeader::new(VOCAB, "fuzz run\twith %odd\nproducer");
    let mut buf = Vec::new();
    write_trace_to(&mut buf, &header, &records).unwrap();
    let back = read_trace_from(buf.as_slice()).unwrap();
    assert_eq!(back.header, header);
    assert_eq!(back.records.len(), records.len());
    let diffs: usize = records
        .iter()
        .zip(&back.records)
        .map(|(a, b)| field_diffs(a, b))
        .sum();
    assert_eq!(diffs, 0);

    let mut again = Vec::new();
    write_trace_to(&mut again, &back.header, &back.records).unwrap();
    assert_eq!(again, buf);
}

fn live_setup(seed: u64) -> (SyntheticTarget, PerturbedDraftConfig) {
    let target = SyntheticTarget::new(SyntheticTargetConfig::with_seed(seed)).unwrap();
    (
        target,
        PerturbedDraftConfig {
            noise_seed: seed ^ 5,
            noise_scale: 1.0,
        },
    )
}

#[test]
fn replay_reproduces_live_decisions() {
    for (seed, policy, k) in [
        (1, VerificationPolicy::Strict, 7),
        (2, VerificationPolicy::margin_aware(0.9).unwrap(), 7),
        (3, VerificationPolicy::margin_aware(0.84).unwrap(), 4),
        (4, VerificationPolicy::margin_aware(0.96).unwrap(), 12),
    ] {
        let (target, dcfg) = live_setup(seed);
        let draft = PerturbedDraft::new(&target, dcfg).unwrap();
        let config = DecodeConfig {
            k,
            max_tokens: 600,
            policy,
            rng_seed: seed,
            ..Default::default()
        };
        let (live, records) = decode_recorded(&target, &draft, &config, &toks(&[1])).unwrap();
        assert_eq!(records.len(), live.cycles.len() * (k + 1));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("live.trace");
        write_trace(&path, &TraceHeader::new(64, "test"), &records).unwrap();
        let trace = read_trace(&path).unwrap();
        let replay = replay_verify(&trace, policy, k, &CostModel::default()).unwrap();
        assert_eq!(replay.cycles, live.cycles, "seed {seed}");
        let mut live_metrics = live.metrics.clone();
        live_metrics.agreement_rate = None;
        assert_eq!(replay.metrics, live_metrics);
    }
}

#[test]
fn replay_under_another_policy_uses_recorded_drafts() {
    let (target, dcfg) = live_setup(9);
    let draft = PerturbedDraft::new(&target, dcfg).unwrap();
    let config = DecodeConfig {
        max_tokens: 400,
        policy: VerificationPolicy::Strict,
        ..Default::default()
    };
    let (live, records) = decode_recorded(&target, &draft, &config, &toks(&[2])).unwrap();
    let trace = TraceFile {
        header: TraceHeader::new(64, "t"),
        records,
    };
    let relaxed = replay_verify(
        &trace,
        VerificationPolicy::margin_aware(0.9).unwrap(),
        7,
        &CostModel::default(),
    )
    .unwrap();
    assert_eq!(relaxed.cycles.len(), live.cycles.len());
    assert!(relaxed.metrics.tau >= live.metrics.tau);
}

#[test]
fn aligned_trace_replays_at_the_ceiling() {
    let target = SyntheticTarget::new(SyntheticTargetConfig::with_seed(3)).unwrap();
    let draft = PerturbedDraft::new(
        &target,
        PerturbedDraftConfig {
            noise_seed: 0,
            noise_scale: 0.0,
        },
    )
    .unwrap();
    let config = DecodeConfig {
        max_tokens: 160,
        ..Default::default()
    };
    let (_, records) = decode_recorded(&target, &draft, &config, &toks(&[7])).unwrap();
    let trace = TraceFile {
        header: TraceHeader::new(64, "t"),
        records,
    };
    let out = replay_verify(&trace, VerificationPolicy::Strict, 7, &CostModel::default()).unwrap();
    assert_eq!(out.metrics.tau, 8.0);
    assert_eq!(out.metrics.cycles, 20);
}

#[test]
fn cli_record_then_replay_matches_record_row() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("run.trace");
    let trace_arg = trace.to_str().unwrap();
    let mut rec_out = Vec::new();
    let mut err = Vec::new();
    let code = run_cli(
        [
            "mars-lab",
            "record",
            "--theta",
            "0.9",
            "--k",
            "7",
            "--max-tokens",
            "300",
            "--seed",
            "5",
            "--out",
            trace_arg,
        ],
        &mut rec_out,
        &mut err,
    );
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    let mut rep_out = Vec::new();
    let code = run_cli(
        [
            "mars-lab", "replay", trace_arg, "--theta", "0.9", "--k", "7",
        ],
        &mut rep_out,
        &mut err,
    );
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));

    let rows = |bytes: &[u8]| -> Vec<csv::StringRecord> {
        csv::Reader::from_reader(bytes)
            .records()
            .map(|r| r.unwrap())
            .collect()
    };
    let (rec, rep) = (rows(&rec_out), rows(&rep_out));
    let headers = csv::Reader::from_reader(rec_out.as_slice())
        .headers()
        .unwrap()
        .clone();
    for col in [
        "cycles",
        "total_committed",
        "tau",
        "exact_count",
        "relaxed_count",
        "rejected_count",
        "bonus_count",
        "simulated_speedup",
    ] {
        let i = headers.iter().position(|h| h == col).unwrap();
        assert_eq!(rec[0].get(i), rep[0].get(i), "column {col}");
    }
}
