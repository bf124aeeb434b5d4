use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datahub::fixtures::{journey, schema};
use crate::datahub::{Batch, Dataset, Journey};
use crate::diffcore::{Array, Graph, ParamStore};
use crate::user_cam::{average_maps, sample_fake_maps, MapSource};

fn tiny() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { hidden: 8, layers: 2, dropout: 0.0, ..Default::default() },
        cam: CamConfig { d_p: 4, heads: 2, ..Default::default() },
        batch_size: 16,
        max_epochs: 4,
        ..Default::default()
    }
}

fn random_journey(rng: &mut ChaCha8Rng, id: usize, len: usize) -> Journey {
    let mut j = journey(&format!("r{id:03}"), &vec![0; len], rng.gen());
    j.user_cat = vec![rng.gen_range(0..3)];
    j.user_num = vec![rng.gen_range(-2.0..2.0)];
    for tp in &mut j.touchpoints {
        tp.channel = rng.gen_range(0..3);
        tp.features = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    }
    j
}

/// Converts exactly when channel 0 appears.
fn separable(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let js = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..5);
            let mut j = random_journey(&mut rng, i, len);
            j.converted = j.touchpoints.iter().any(|t| t.channel == 0);
            j
        })
        .collect();
    Dataset::new(schema(3), js).unwrap()
}

fn net_and_store(cfg: &ModelConfig, seed: u64) -> (DcrmtaNet, ParamStore) {
    let mut store = ParamStore::new();
    let net = DcrmtaNet::build(cfg, &schema(3), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, store)
}

fn batch_of(js: &[Journey]) -> Batch {
    Batch::from_journeys(&schema(3), js.iter().enumerate())
}

fn fakes(cfg: &ModelConfig, rows: usize, seed: u64) -> Vec<Array> {
    average_maps(&sample_fake_maps(cfg.cam.heads, rows, cfg.cam.d_p, cfg.cam.n_fake, &mut ChaCha8Rng::seed_from_u64(seed)))
}

#[test]
fn defaults_follow_reference_weights() {
    let c = ModelConfig::default();
    assert_eq!((c.alpha, c.beta, c.gamma), (1.0, 0.5, 0.5));
    assert_eq!((c.encoder.hidden, c.encoder.layers, c.encoder.dropout), (64, 3, 0.2));
    assert_eq!((c.encoder.channel_dim, c.encoder.feature_dim, c.cam.user_dim), (4, 5, 5));
    let bad = ModelConfig { gamma: -0.1, ..Default::default() };
    assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    let err = serde_json::from_str::<ModelConfig>(r#"{"alpha": 1.0, "alhpa": 2.0}"#);
    assert!(err.is_err());
}

#[test]
fn matching_maps_give_constant_counterfactual() {
    let cfg = tiny();
    let (net, store) = net_and_store(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let js: Vec<Journey> = (0..5).map(|i| random_journey(&mut rng, i, 1 + i % 3)).collect();
    let b = batch_of(&js);
    let mut g = Graph::new(false, 0);
    let out = net.forward(&mut g, &store, &b, MapSource::Factual, false).unwrap();
    assert!(g.value(out.v_eff.unwrap()).data().iter().all(|&v| v == 0.0));
    let base = net.baseline_probability(&store);
    for &p in g.value(out.p_hat.unwrap()).data() {
        assert_eq!(p, base);
    }
    for &p in g.value(out.p).data() {
        assert!(p > 0.0 && p < 1.0);
    }
}

#[test]
fn m_cancels_exactly() {
    let cfg = tiny();
    let (net, store) = net_and_store(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let rand_arr = |rng: &mut ChaCha8Rng| Array::new(vec![3, 8], (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
    let (s, s_hat) = (rand_arr(&mut rng), rand_arr(&mut rng));
    let mut effs = Vec::new();
    for _ in 0..3 {
        let mut g = Graph::new(false, 0);
        let (sn, shn, mn) = (g.constant(s.clone()), g.constant(s_hat.clone()), g.constant(rand_arr(&mut rng)));
        let (_, _, v_eff) = net.fuse(&mut g, &store, sn, Some(shn), mn).unwrap();
        effs.push(g.value(v_eff.unwrap()).clone());
    }
    let want: Vec<f64> = s.data().iter().zip(s_hat.data()).map(|(a, b)| a - b).collect();
    for e in effs {
        assert_eq!(e.data(), want.as_slice());
    }
}

#[test]
fn cpred_examples_and_oracle() {
    let mut g = Graph::new(false, 0);
    let p = g.constant(Array::column(vec![1.0, 0.0]));
    let l = loss_cpred(&mut g, p, Some(p), &[1.0, 0.0], 0.5, 0.5).unwrap();
    assert!(g.value(l).data()[0] < 1e-11);
    let h = g.constant(Array::column(vec![0.5]));
    let l = loss_cpred(&mut g, h, Some(h), &[1.0], 0.5, 0.5).unwrap();
    assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    assert!((g.value(l).data()[0] - 0.6931).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ps: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..0.99)).collect();
    let qs: Vec<f64> = (0..20).map(|_| rng.gen_range(0.01..0.99)).collect();
    let ys: Vec<f64> = (0..20).map(|_| rng.gen_range(0..2) as f64).collect();
    let ce = |p: f64, y: f64| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let want: f64 = (0..20).map(|i| 0.3 * ce(ps[i], ys[i]) + 0.9 * ce(qs[i], ys[i])).sum();
    let (pn, qn) = (g.constant(Array::column(ps)), g.constant(Array::column(qs)));
    let l = loss_cpred(&mut g, pn, Some(qn), &ys, 0.3, 0.9).unwrap();
    assert!((g.value(l).data()[0] - want).abs() < 1e-12);
}

fn losses(cfg: &ModelConfig, js: &[Journey]) -> (f64, f64, Option<f64>) {
    let (net, store) = net_and_store(cfg, 4);
    let b = batch_of(js);
    let f = fakes(cfg, js.len(), 9);
    let mut g = Graph::new(true, 5);
    let (_, parts) = net.loss(&mut g, &store, &b, Some(&f)).unwrap();
    let v = |id| g.value(id).data()[0];
    (v(parts.total), v(parts.cpred), parts.rev.map(v))
}

#[test]
fn loss_terms_isolate() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let js: Vec<Journey> = (0..6).map(|i| random_journey(&mut rng, i, 1 + i % 4)).collect();
    let (total, cpred, rev) = losses(&ModelConfig { beta: 0.0, gamma: 0.0, ..tiny() }, &js);
    assert_eq!(cpred, 0.0);
    assert_eq!(total, rev.unwrap());
    let (total, cpred, rev) = losses(&ModelConfig { alpha: 0.0, disable_grl: true, ..tiny() }, &js);
    assert_eq!(total, cpred);
    assert!(rev.is_none());

    // gamma enters linearly
    let only_cf = |gamma| losses(&ModelConfig { beta: 0.0, alpha: 0.0, gamma, ..tiny() }, &js).1;
    assert_eq!(only_cf(1.0), 2.0 * only_cf(0.5));
}

/// Parameters below the reversal layer see `d cpred - lambda d rev`; the rest see `d total`.
#[test]
fn total_loss_matches_finite_differences() {
    let cfg = ModelConfig { encoder: EncoderConfig { dropout: 0.2, ..tiny().encoder }, lambda: 0.7, ..tiny() };
    let (net, mut store) = net_and_store(&cfg, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let js: Vec<Journey> = (0..4).map(|i| random_journey(&mut rng, i, 1 + i)).collect();
    let b = batch_of(&js);
    let f = fakes(&cfg, 4, 7);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(true, 11);
        let (_, parts) = net.loss(&mut g, store, &b, Some(&f)).unwrap();
        let v = |id| g.value(id).data()[0];
        (v(parts.cpred), v(parts.rev.unwrap()), parts.total, g)
    };
    let (_, _, root, mut g) = eval(&store);
    g.backward(root).unwrap();
    store.zero_grads();
    g.accumulate_param_grads(&mut store);
    let rev_head = net.encoder().reverse_head_params();
    let ids: Vec<_> = store.ids().collect();
    let mut flipped = 0;
    for _ in 0..60 {
        let id = ids[rng.gen_range(0..ids.len())];
        let k = rng.gen_range(0..store.value(id).len());
        let analytic = store.grad(id)[k];
        let x0 = store.value(id).data()[k];
        let h = 1e-6;
        store.values_mut(id)[k] = x0 + h;
        let (cu, ru, ..) = eval(&store);
        store.values_mut(id)[k] = x0 - h;
        let (cd, rd, ..) = eval(&store);
        store.values_mut(id)[k] = x0;
        let (dc, dr) = ((cu - cd) / (2.0 * h), (ru - rd) / (2.0 * h));
        let below_reversal = store.name(id).starts_with("enc.") && !rev_head.contains(&id);
        let want = if below_reversal { dc - cfg.lambda * dr } else { dc + dr };
        flipped += (below_reversal && dr.abs() > 1e-6) as usize;
        let rel = (want - analytic).abs() / want.abs().max(analytic.abs()).max(1e-2);
        assert!(rel < 1e-4, "{} [{k}]: fd {want} vs {analytic}", store.name(id));
    }
    assert!(flipped > 0);
}

#[test]
fn separable_toy_is_learned() {
    let ds = separable(100, 1);
    let cfg = ModelConfig { max_epochs: 50, batch_size: 32, learning_rate: 1e-2, ..ModelConfig::default() };
    let m = train(&ds, &ds, &cfg).unwrap();
    let auc = m.evaluate(&ds).unwrap().auc.unwrap();
    assert!(auc >= 0.95, "{auc}");
    let lr = train_baseline_lr(&ds, &ds, &ModelConfig { max_epochs: 50, batch_size: 32, ..ModelConfig::default() }).unwrap();
    let auc = lr.evaluate(&ds).unwrap().auc.unwrap();
    assert!(auc >= 0.95, "{auc}");
}

#[test]
fn training_is_deterministic_and_keeps_best() {
    let ds = separable(80, 2);
    let val = separable(40, 3);
    let a = train(&ds, &val, &tiny()).unwrap();
    let b = train(&ds, &val, &tiny()).unwrap();
    assert_eq!(a.history(), b.history());
    assert_eq!(to_bytes(&a).unwrap(), to_bytes(&b).unwrap());
    let best = a.best_val_auc().unwrap();
    assert_eq!(a.history()[a.best_epoch() - 1].val_auc, Some(best));
    // the snapshot held is the best epoch's
    assert_eq!(a.evaluate(&val).unwrap().auc, Some(best));
}

#[test]
fn ablations_run_and_record_history() {
    let ds = separable(60, 4);
    let nu = train(&ds, &ds, &ModelConfig { disable_user_cam: true, ..tiny() }).unwrap();
    assert!(!nu.history().is_empty());
    assert!(nu.net().unwrap().cam().is_none());
    let nc = train(&ds, &ds, &ModelConfig { disable_grl: true, ..tiny() }).unwrap();
    assert!(nc.history().iter().all(|r| r.train_rev.is_none()));
    let full = train(&ds, &ds, &tiny()).unwrap();
    assert!(full.history().iter().all(|r| r.train_rev.is_some()));
}

#[test]
fn subset_scoring_conventions() {
    let ds = separable(30, 5);
    let m = train(&ds, &ds, &ModelConfig { max_epochs: 2, ..tiny() }).unwrap();
    let p = m.predict(&ds).unwrap();
    for (j, &pj) in ds.journeys().iter().zip(&p) {
        assert_eq!(m.score_subset(j, &vec![true; j.len()]).unwrap(), pj);
    }
    // empty coalition depends on nothing but the head
    let base = m.net().unwrap().baseline_probability(m.params());
    for j in ds.journeys() {
        assert_eq!(m.score_subset(j, &vec![false; j.len()]).unwrap(), base);
    }
    let nu = train(&ds, &ds, &ModelConfig { max_epochs: 1, disable_user_cam: true, ..tiny() }).unwrap();
    let (a, mut b) = (ds.journeys()[0].clone(), ds.journeys()[1].clone());
    b.user_cat = a.user_cat.clone();
    b.user_num = a.user_num.clone();
    let ea = nu.score_subset(&a, &vec![false; a.len()]).unwrap();
    let eb = nu.score_subset(&b, &vec![false; b.len()]).unwrap();
    assert_eq!(ea, eb);
    assert!(m.score_subset(&a, &[true]).is_err() || a.len() == 1);
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]), Some(1.0));
    assert_eq!(auc(&[0.3, 0.3, 0.3, 0.3], &[1.0, 0.0, 1.0, 0.0]), Some(0.5));
    assert_eq!(auc(&[0.3, 0.4], &[1.0, 1.0]), None);
    let r = evaluate_scores(&[0.2, 0.6], &[0.0, 0.0]);
    assert!(r.auc.is_none());
    assert!((r.rmse - (0.2f64).sqrt()).abs() < 1e-15);
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(data in prop::collection::vec((0u8..6, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<f64> = data.iter().map(|(_, y)| *y as u8 as f64).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let got = auc(&scores, &labels);
        if pairs == 0.0 {
            prop_assert!(got.is_none());
        } else {
            prop_assert!((got.unwrap() - wins / pairs).abs() < 1e-12);
        }
    }
}

#[test]
fn logistic_starts_at_one_half() {
    let ds = separable(20, 6);
    let m = TrainedModel::init(ModelKind::LogReg, &tiny(), ds.schema()).unwrap();
    assert!(m.predict(&ds).unwrap().iter().all(|&p| p == 0.5));
    assert_eq!(lr_features(ds.schema(), &ds.journeys()[0]).len(), 3 + 2 + 3 + 1);
}

#[test]
fn checkpoint_round_trip() {
    let ds = separable(40, 7);
    let m = train(&ds, &ds, &ModelConfig { max_epochs: 2, ..tiny() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_model(&m, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.evaluate(&ds).unwrap(), m.evaluate(&ds).unwrap());
    assert_eq!(back.history(), m.history());
    assert_eq!(to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[20 + header_len..28 + header_len].try_into().unwrap()) as usize;
    assert_eq!(count, m.params().len());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_bytes(&bad), Err(ModelError::Checkpoint(_))));
    assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(ModelError::Checkpoint(_))));
    let mut v2 = bytes.clone();
    v2[8] = 2;
    assert!(from_bytes(&v2).unwrap_err().to_string().contains("version"));

    let lr = train_baseline_lr(&ds, &ds, &ModelConfig { max_epochs: 2, ..tiny() }).unwrap();
    let back = from_bytes(&to_bytes(&lr).unwrap()).unwrap();
    assert_eq!(back.kind(), ModelKind::LogReg);
    assert_eq!(back.predict(&ds).unwrap(), lr.predict(&ds).unwrap());
}
