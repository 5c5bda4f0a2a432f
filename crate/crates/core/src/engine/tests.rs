use super::*;
use crate::exit::should_exit;
use crate::model::{build_model, HeadMode, ToyModelSpec, EOS_TOKEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(num_layers: usize) -> ToyModel {
    build_model(ToyModelSpec { num_layers, hidden_dim: 8, vocab_size: 16, max_context: 48, seed: 13 })
        .unwrap()
        .with_head_mode(HeadMode::Oracle)
}

fn cfg(m: &ToyModel, threshold: f64, alpha: f64, d_max: usize, w_max: usize) -> EngineConfig {
    let mut c = EngineConfig::for_layers(m.num_layers());
    c.act = ActConfig::new(alpha, threshold, m.num_layers()).unwrap();
    c.d_max = d_max;
    c.w_max = w_max;
    c.max_new_tokens = 12;
    c
}

fn prompts(n: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..6);
            (0..len).map(|_| rng.gen_range(2..vocab)).collect()
        })
        .collect()
}

#[test]
fn greedy_matches_baseline_across_configs() {
    let m = model(6);
    let ps = prompts(12, 16, 1);
    for &(t, a, d, w) in &[(0.05, 0.0, 1, 1), (0.2, 0.2, 3, 4), (0.3, 1.0, 5, 8), (0.99, 0.5, 2, 8), (0.1, 0.0, 5, 3)] {
        let report = assert_equivalence(&m, &ps, &cfg(&m, t, a, d, w)).unwrap();
        assert!(report.is_lossless(), "tau {t} alpha {a} d {d} w {w}: {:?}", report.prompts);
    }
}

#[test]
fn trained_heads_are_lossless_too() {
    let m = model(6).with_head_mode(HeadMode::Trained);
    let report = assert_equivalence(&m, &prompts(10, 16, 2), &cfg(&m, 0.1, 0.2, 4, 6)).unwrap();
    assert_eq!(report.mismatches, 0);
}

#[test]
fn faulty_verifier_is_caught() {
    let m = model(6);
    let mut c = cfg(&m, 0.2, 0.2, 3, 4);
    c.verifier_fault = true;
    let report = assert_equivalence(&m, &prompts(10, 16, 3), &c).unwrap();
    assert!(report.mismatches > 0);
    assert!(report.prompts.iter().any(|p| p.first_divergence.is_some()));
}

#[test]
fn prefill_anchor_is_last_prompt_logits() {
    let m = model(6);
    let prompt = [4u32, 9, 2, 7, 3];
    let s = Session::prefill(&m, &prompt, &cfg(&m, 0.3, 0.2, 3, 4)).unwrap();
    for layer in 1..=6 {
        assert_eq!(s.kv().len(layer), 5);
    }
    let states = m.full_forward(&prompt).unwrap();
    assert_eq!(s.anchor().unwrap(), &m.final_logits(&states[4][6]).unwrap()[..]);
    assert!(matches!(Session::prefill(&m, &[], &cfg(&m, 0.3, 0.2, 3, 4)), Err(Error::EmptyPrompt)));
}

#[test]
fn prefill_then_anchor_commit_matches_decode() {
    let m = model(6);
    let c = cfg(&m, 0.25, 0.2, 3, 4);
    let prompt = vec![5u32, 6, 11];
    let mut s = Session::prefill(&m, &prompt, &c).unwrap();
    s.commit_anchor().unwrap();
    assert!(s.commit_anchor().is_err());
    let via_prefill = run_session(s).unwrap();
    let direct = decode(&m, &prompt, &c).unwrap();
    assert_eq!(via_prefill.tokens, direct.tokens);
}

#[test]
fn reconfigured_session_matches_fresh_decode() {
    let m = model(6);
    let prompt = vec![4u32, 9, 2, 13, 7];
    let first = cfg(&m, 0.25, 0.2, 3, 4);
    let start = Session::start(&m, &prompt, &first).unwrap();
    for c in [cfg(&m, 0.6, 0.0, 1, 1), cfg(&m, 0.2, 1.0, 5, 8)] {
        let mut s = start.clone();
        s.reconfigure(&c).unwrap();
        let (a, b) = (run_session(s).unwrap(), decode(&m, &prompt, &c).unwrap());
        assert_eq!((a.tokens, a.traces), (b.tokens, b.traces));
    }
    let mut s = start.clone();
    s.run_round().unwrap();
    assert!(s.reconfigure(&first).is_err());
}

#[test]
fn every_committed_state_matches_full_forward() {
    let m = model(6);
    for (i, prompt) in prompts(8, 16, 4).iter().enumerate() {
        let c = cfg(&m, 0.15 + 0.1 * i as f64, 0.2, 1 + i % 5, 1 + i % 4);
        let mut s = Session::start_recorded(&m, prompt, &c).unwrap();
        while !s.is_finished() {
            s.run_round().unwrap();
        }
        let rec = s.recorded_states().unwrap();
        let oracle = m.full_forward(s.tokens()).unwrap();
        assert_eq!(rec.len(), s.tokens().len() - 1);
        for (pos, states) in rec.iter().enumerate() {
            assert_eq!(states, &oracle[pos], "prompt {i} position {pos}");
        }
    }
}

#[test]
fn scripted_depth_bound_round() {
    // Two drafts exit at layers 2 and 4; the third attempt never exits.
    let m = model(8);
    let c = cfg(&m, 0.5, 0.2, 6, 8);
    let mut s = Session::start(&m, &[3, 7, 2], &c).unwrap();
    s.script_exits([Some(2), Some(4), None]);
    assert!(matches!(s.draft_next().unwrap(), DraftOutcome::Exited(d) if d.exit_layer == Some(2)));
    assert!(matches!(s.draft_next().unwrap(), DraftOutcome::Exited(d) if d.exit_layer == Some(4)));
    assert_eq!(s.draft_next().unwrap(), DraftOutcome::DepthBoundHit);
    let hs = s.hidden_states();
    assert_eq!((0..3).map(|i| hs.high_water(i)).collect::<Vec<_>>(), vec![6, 6, 6]);
    let (target, units, _) = s.align_block(Trigger::DepthBound).unwrap();
    assert_eq!((target, units), (6, 0));
}

#[test]
fn scripted_width_bound_alignment() {
    // Exits at 2, 4, 6, 2 with w_max = 4: align to 6, last token runs 3..=6.
    let m = model(8);
    let c = cfg(&m, 0.5, 0.2, 7, 4);
    // Skip prompts whose drafts run into the end-of-sequence token.
    let t = prompts(20, 16, 8)
        .iter()
        .map(|p| {
            let mut s = Session::start(&m, p, &c).unwrap();
            s.script_exits([Some(2), Some(4), Some(6), Some(2)]);
            s.run_round().unwrap()
        })
        .find(|t| t.drafts.iter().all(|d| d.token_id != EOS_TOKEN))
        .unwrap();
    assert_eq!(t.trigger, Trigger::WidthBound);
    assert_eq!(t.align_target_layer, 6);
    assert_eq!(t.layer_units_align, 4);
    assert_eq!(t.align_layers, 4);
    assert_eq!(t.layer_units_draft, 2 + 4 + 6 + 2);
    assert_eq!(t.verify_layers, 2);
    assert_eq!(t.layer_units_verify, 4 * 2);
    t.check(7, 4).unwrap();
}

#[test]
fn alignment_modes_agree_on_output() {
    let m = model(8);
    let ps = prompts(6, 16, 9);
    let mut c = cfg(&m, 0.3, 0.2, 5, 6);
    let a = ps.iter().map(|p| decode(&m, p, &c).unwrap()).collect::<Vec<_>>();
    c.depth_align = DepthAlign::DeepestExit;
    let b = ps.iter().map(|p| decode(&m, p, &c).unwrap()).collect::<Vec<_>>();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tokens, y.tokens);
        for (tx, ty) in x.traces.iter().zip(&y.traces) {
            assert!(ty.align_target_layer <= tx.align_target_layer);
        }
    }
}

#[test]
fn extension_paths_agree() {
    let m = model(10);
    let c = cfg(&m, 0.5, 0.2, 9, 4);
    let mut s = Session::start(&m, &[2, 9, 4], &c).unwrap();
    s.script_exits([Some(4)]);
    s.draft_next().unwrap();
    let pos = s.hidden_states().position(0);
    let mut one = s.clone();
    let mut two = s.clone();
    assert_eq!(s.extend_to_layer(pos, 4).unwrap(), 0);
    assert_eq!(two.extend_to_layer(pos, 6).unwrap() + two.extend_to_layer(pos, 9).unwrap(), 5);
    assert_eq!(one.extend_to_layer(pos, 9).unwrap(), 5);
    assert_eq!(one.hidden_states().get(0, 9).unwrap(), two.hidden_states().get(0, 9).unwrap());

    one.extend_to_layer(pos, 10).unwrap();
    let states = m.full_forward(&[2, 9, 4]).unwrap();
    let h = one.hidden_states().get(0, 10).unwrap();
    assert_eq!(m.final_logits(h).unwrap(), m.final_logits(&states[2][10]).unwrap());
    assert!(one.extend_to_layer(pos + 3, 5).is_err());
}

#[test]
fn unreachable_threshold_degenerates_to_autoregression() {
    let m = model(6);
    let c = cfg(&m, 0.999999, 0.0, 4, 8);
    let out = decode(&m, &[5, 2], &c).unwrap();
    assert_eq!(out.traces.len(), out.tokens.len());
    for t in &out.traces {
        assert!(t.drafts.is_empty());
        assert_eq!(t.trigger, Trigger::DepthBound);
        assert_eq!(t.committed.len(), 1);
        assert_eq!(t.layer_units_draft, 4);
        assert_eq!(t.layer_units_verify, 2);
    }
}

#[test]
fn tiny_threshold_exits_at_first_layer() {
    let m = model(6);
    let c = cfg(&m, 1e-9, 0.3, 4, 5);
    let out = decode(&m, &[5, 2, 8], &c).unwrap();
    assert!(out.traces.iter().flat_map(|t| &t.drafts).all(|d| d.exit_layer == Some(1)));
}

#[test]
fn single_width_drafts_once_per_round() {
    let m = model(6);
    let c = cfg(&m, 0.3, 0.2, 3, 1);
    let out = decode(&m, &[4, 4, 9], &c).unwrap();
    for t in &out.traces {
        assert_eq!(t.attempts, 1);
        assert!(t.drafts.len() <= 1);
        assert!(t.accepted_count <= 1);
    }
}

#[test]
fn traces_respect_bounds_and_account_for_output() {
    let m = model(6);
    for (i, p) in prompts(10, 16, 5).iter().enumerate() {
        let c = cfg(&m, 0.1 + 0.08 * i as f64, 0.2, 1 + i % 5, 1 + i % 8);
        let out = decode(&m, p, &c).unwrap();
        for t in &out.traces {
            t.check(c.d_max, c.w_max).unwrap();
        }
        let committed: usize = out.traces.iter().map(RoundTrace::committed_count).sum();
        assert_eq!(committed, out.tokens.len());
        assert_eq!(out.traces.len(), out.round_micros.len());
    }
}

#[test]
fn exit_layer_matches_scan_without_annealing() {
    let m = model(6);
    let c = cfg(&m, 0.2, 0.0, 5, 1);
    let prompt = [6u32, 3, 12, 7];
    let mut s = Session::start(&m, &prompt, &c).unwrap();
    let outcome = s.draft_next().unwrap();
    let states = m.full_forward(&prompt).unwrap();
    let expected = (1..=5).find(|&l| should_exit(&m.exit_logits(l, &states[3][l]).unwrap(), l, &c.act).unwrap().exited);
    let scan = layer_scan(&m, &prompt, 1, &c.act).unwrap();
    let from_scan = (1..=5).find(|&l| scan.cells[l - 1][0].confidence >= 0.2);
    assert_eq!(expected, from_scan);
    match outcome {
        DraftOutcome::Exited(d) => assert_eq!(d.exit_layer, expected),
        DraftOutcome::DepthBoundHit => assert_eq!(expected, None),
    }
}

#[test]
fn first_draft_rejection_commits_one_token() {
    let m = model(6);
    let c = cfg(&m, 0.05, 0.0, 1, 4);
    for p in prompts(20, 16, 6) {
        let mut s = Session::start(&m, &p, &c).unwrap();
        let t = s.run_round().unwrap();
        if t.accepted_count == 0 && !t.drafts.is_empty() {
            assert_eq!(t.committed.len(), 1);
            assert_ne!(t.committed[0], t.drafts[0].token_id);
            assert_eq!(s.kv().min_len(), p.len());
            return;
        }
    }
    panic!("no prompt produced an immediate rejection");
}

#[test]
fn sampling_is_seeded() {
    let m = model(6);
    let mut c = cfg(&m, 0.2, 0.2, 3, 4);
    c.strategy = DecodeStrategy::TopP { p: 0.9, temperature: 0.8 };
    c.rng_seed = 77;
    let a = decode(&m, &[3, 4], &c).unwrap();
    let b = decode(&m, &[3, 4], &c).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.traces, b.traces);
    assert!(a.traces.iter().flat_map(|t| &t.drafts).all(|d| d.draft_distribution.is_some()));
    assert!(assert_equivalence(&m, &[vec![3]], &c).is_err());
}

#[test]
fn end_of_sequence_stops_both_decoders() {
    let mut m = model(6);
    // Make the final head strongly prefer the end-of-sequence token.
    let d = m.hidden_dim();
    let row = EOS_TOKEN as usize * d;
    let boost: Vec<f64> = m.final_gain.iter().map(|g| g.signum()).collect();
    for i in 0..d {
        m.lm_head[row + i] = 0.0;
    }
    let states = m.full_forward(&[5, 6]).unwrap();
    let f = m.readout_features(&states[1][6]).unwrap();
    for i in 0..d {
        m.lm_head[row + i] = 40.0 * f[i] * boost[i];
    }
    let c = cfg(&m, 0.3, 0.2, 3, 4);
    let out = decode(&m, &[5, 6], &c).unwrap();
    assert!(out.hit_eos);
    assert_eq!(out.tokens, vec![EOS_TOKEN]);
    assert!(assert_equivalence(&m, &[vec![5, 6]], &c).unwrap().is_lossless());
}

#[test]
fn context_limit_truncates_cleanly() {
    let m = model(6);
    let mut c = cfg(&m, 0.2, 0.2, 3, 8);
    c.max_new_tokens = 100;
    let out = decode(&m, &[2; 40], &c).unwrap();
    assert!(out.truncated);
    assert_eq!(out.tokens.len(), 8);
    let full = decode(&m, &[2; 48], &c).unwrap();
    assert!(full.tokens.is_empty() && full.truncated);
    assert!(matches!(decode(&m, &[2; 49], &c), Err(Error::ContextOverflow { .. })));
}

#[test]
fn zero_budget_decodes_nothing() {
    let m = model(6);
    let mut c = cfg(&m, 0.2, 0.2, 3, 8);
    c.max_new_tokens = 0;
    let out = decode(&m, &[2, 3], &c).unwrap();
    assert!(out.tokens.is_empty() && out.traces.is_empty() && !out.truncated);
}

#[test]
fn config_validation_and_toml() {
    let m = model(6);
    let mut c = cfg(&m, 0.2, 0.2, 6, 8);
    assert!(c.validate(6).is_err());
    c.d_max = 5;
    c.validate(6).unwrap();
    c.w_max = 0;
    assert!(c.validate(6).is_err());
    c.w_max = 3;
    c.strategy = DecodeStrategy::Temperature(0.7);
    let text = c.to_toml_string();
    assert_eq!(EngineConfig::from_toml_str(&text, 6).unwrap(), c);
    let parsed = EngineConfig::from_toml_str("threshold = 0.8\nd_max = 2\nstrategy = \"top_p:0.9:1.0\"\n", 6).unwrap();
    assert_eq!(parsed.d_max, 2);
    assert_eq!(parsed.act.threshold, 0.8);
    assert_eq!(parsed.w_max, EngineConfigFile::default().w_max);
    assert!(EngineConfig::from_toml_str("d_max = 9", 6).is_err());
    assert!(EngineConfig::from_toml_str("bogus = 1", 6).is_err());
}
