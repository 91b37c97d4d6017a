use super::*;
use crate::numcore::{finite_diff_check, AdamW, AdamWConfig};
use crate::surgery::lang_table_name;
use crate::vocab::EOT;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 5,
        model_dim: 8,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        ffn_dim: 12,
        max_decode_len: 16,
        frames_per_token: 2,
    }
}

fn tiny_vocab() -> Vocabulary {
    Vocabulary::new(&["a", "b", "c", "d", "e", " "], &["aa", "bb"]).unwrap()
}

fn features<T: Real>(frames: usize, f: usize, seed: u64) -> Matrix<T> {
    let mut rng = substream(seed, "feat");
    normal_matrix(frames, f, 1.0, &mut rng)
}

/// Model with a third language "cc" that owns a table over tokens a, c, e.
fn model_with_table<T: Real>(config: ModelConfig) -> (Model<T>, Vec<TokenId>) {
    let mut m = Model::<T>::new(config, tiny_vocab(), 11).unwrap();
    m.add_language("cc", 3).unwrap();
    let ids: Vec<TokenId> = ["a", "c", "e"].iter().map(|t| m.vocab.id_of(t).unwrap()).collect();
    m.spawn_language_table("cc", &[ids.clone()]).unwrap();
    (m, ids)
}

fn target(m: &Model<impl Real>, lang: &str, body: &[TokenId]) -> TokenSeq {
    let mut t = vec![SOT, m.vocab.lid(lang).unwrap()];
    t.extend_from_slice(body);
    t.push(EOT);
    t
}

#[test]
fn zero_layer_encoder_is_linear_projection() {
    let cfg = ModelConfig {
        encoder_layers: 0,
        ..tiny_config()
    };
    let m = Model::<f64>::new(cfg, tiny_vocab(), 1).unwrap();
    let x = features::<f64>(6, 5, 2);
    let mem = m.encode(&x).unwrap();
    let w = m.params.by_name("enc.in.w").unwrap().value.clone();
    let b = m.params.by_name("enc.in.b").unwrap().value.clone();
    let mut expect = x.matmul(&w).unwrap();
    expect.add_row_broadcast(&b).unwrap();
    assert_eq!(mem, expect);
}

#[test]
fn encode_is_deterministic_and_checks_dims() {
    let m = Model::<f32>::new(tiny_config(), tiny_vocab(), 1).unwrap();
    let x = features::<f32>(7, 5, 3);
    let a = m.encode(&x).unwrap();
    assert_eq!(a.shape(), (7, 8));
    assert_eq!(a, m.encode(&x).unwrap());
    assert!(matches!(m.encode(&features::<f32>(7, 4, 3)), Err(Error::Shape { .. })));
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        heads: 3,
        ..tiny_config()
    };
    assert!(bad.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
    let d = ModelConfig::default();
    assert_eq!((d.model_dim, d.encoder_layers, d.decoder_layers, d.heads, d.max_decode_len), (64, 2, 2, 4, 48));
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let (mut m, ids) = model_with_table::<f64>(tiny_config());
    let x1 = features::<f64>(8, 5, 4);
    let x2 = features::<f64>(6, 5, 5);
    let vocab_ids = m.vocab.vocab_ids().to_vec();
    let t1 = target(&m, "aa", &[vocab_ids[1], vocab_ids[5], vocab_ids[3]]);
    let t2 = target(&m, "cc", &[ids[2], ids[0]]);

    let total = |m: &Model<f64>, grads: Option<&mut Grads<f64>>| -> Result<f64> {
        let mut tape = LossTape::new();
        let v1 = m.view("aa")?;
        let v2 = m.view("cc")?;
        let l1 = tape.forward(m, Source::Features(&x1), &t1, &v1)?;
        let mut g = Grads::for_store(&m.params);
        tape.backward(m, &mut g)?;
        let l2 = tape.forward(m, Source::Features(&x2), &t2, &v2)?;
        tape.backward(m, &mut g)?;
        if let Some(out) = grads {
            out.merge(&g);
        }
        Ok(l1 + l2)
    };
    let mut grads = Grads::for_store(&m.params);
    total(&m, Some(&mut grads)).unwrap();
    m.params.load_grads(&grads);

    let probe = m.clone();
    let report = finite_diff_check(
        &mut m.params,
        |store| {
            let mut p = probe.clone();
            p.params = store.clone();
            total(&p, None)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.total_entries() > 1000);
    assert!(report.pass_fraction() >= 0.999, "{report:?}");
    assert!(report.max_rel_error() < 1e-3, "{report:?}");
}

#[test]
fn logits_cover_specials_plus_view_vocab() {
    let (m, ids) = model_with_table::<f32>(tiny_config());
    let mem = m.encode(&features::<f32>(4, 5, 1)).unwrap();
    let v = m.view("cc").unwrap();
    let lid = m.vocab.lid("cc").unwrap();
    let logits = m.decode_step(&mem, &[SOT, lid, ids[1]], &v).unwrap();
    assert_eq!(logits.len(), m.vocab.num_specials() + 3);
    let base = m.view("aa").unwrap();
    let logits = m.decode_step(&mem, &[SOT], &base).unwrap();
    assert_eq!(logits.len(), m.vocab.len());
    let unseen = m.vocab.id_of("b").unwrap();
    assert!(matches!(
        m.decode_step(&mem, &[SOT, lid, unseen], &v),
        Err(Error::NotInView { .. })
    ));
    assert!(m.decode_step(&mem, &[lid], &v).is_err());
    let long = vec![SOT; m.config.max_decode_len];
    assert!(m.decode_step(&mem, &long, &base).is_err());
}

#[test]
fn base_view_is_identity_on_untouched_model() {
    let m = Model::<f32>::new(tiny_config(), tiny_vocab(), 2).unwrap();
    let v = m.base_view();
    assert_eq!(v.size(), m.vocab.len());
    for id in 0..m.vocab.len() {
        assert_eq!(v.local(id).unwrap(), id);
    }
    // Logits from the view equal a direct projection onto the global table.
    let mem = m.encode(&features::<f32>(5, 5, 9)).unwrap();
    let prefix = [SOT, m.vocab.lid("bb").unwrap(), m.vocab.vocab_ids()[0]];
    let logits = m.decoder_logits(&mem, &prefix, &v).unwrap();
    let st = m.params.by_name(ST_NAME).unwrap().value.clone();
    let base = m.params.by_name(BASE_NAME).unwrap().value.clone();
    let global = st.hcat(&base).unwrap();
    let local: Vec<usize> = prefix.to_vec();
    let (direct, _) = m.decode_train(&mem, &local, &global).unwrap();
    assert_eq!(logits, direct);
}

#[test]
fn uniform_logits_give_log_n_loss() {
    let mut m = Model::<f64>::new(tiny_config(), tiny_vocab(), 4).unwrap();
    let st = m.embedding.st;
    let base = m.embedding.base;
    let z = Matrix::zeros(8, m.vocab.num_specials());
    m.params.replace(st, z);
    let z = Matrix::zeros(8, m.vocab.vocab_size());
    m.params.replace(base, z);
    let mem = m.encode(&features::<f64>(4, 5, 1)).unwrap();
    let t = target(&m, "aa", &[m.vocab.vocab_ids()[2]]);
    let loss = m.sequence_loss(&mem, &t, &m.base_view()).unwrap();
    assert!((loss - (m.vocab.len() as f64).ln()).abs() < 1e-12);
}

#[test]
fn invalid_targets_are_rejected() {
    let m = Model::<f32>::new(tiny_config(), tiny_vocab(), 4).unwrap();
    let mem = m.encode(&features::<f32>(4, 5, 1)).unwrap();
    let v = m.base_view();
    assert!(matches!(m.sequence_loss(&mem, &[PAD, PAD], &v), Err(Error::InvalidTarget(_))));
    assert!(matches!(m.sequence_loss(&mem, &[SOT], &v), Err(Error::InvalidTarget(_))));
    assert!(matches!(m.sequence_loss(&mem, &[EOT, SOT], &v), Err(Error::InvalidTarget(_))));
}

#[test]
fn backward_requires_forward() {
    let m = Model::<f32>::new(tiny_config(), tiny_vocab(), 4).unwrap();
    let mut tape = LossTape::new();
    let mut g = Grads::for_store(&m.params);
    assert!(matches!(tape.backward(&m, &mut g), Err(Error::BackwardBeforeForward)));
    let mem = m.encode(&features::<f32>(4, 5, 1)).unwrap();
    let t = target(&m, "aa", &[m.vocab.vocab_ids()[2]]);
    tape.forward(&m, Source::Memory(&mem), &t, &m.base_view()).unwrap();
    tape.backward(&m, &mut g).unwrap();
    assert!(matches!(tape.backward(&m, &mut g), Err(Error::BackwardBeforeForward)));
}

#[test]
fn overfitting_one_utterance_decreases_loss() {
    let mut m = Model::<f32>::new(tiny_config(), tiny_vocab(), 5).unwrap();
    let x = features::<f32>(10, 5, 6);
    let ids = m.vocab.vocab_ids().to_vec();
    let t = target(&m, "bb", &[ids[0], ids[5], ids[2], ids[4]]);
    let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, ..Default::default() });
    let mut losses = Vec::new();
    for _ in 0..11 {
        let view = m.base_view();
        let mut tape = LossTape::new();
        let loss = tape.forward(&m, Source::Features(&x), &t, &view).unwrap();
        let mut g = Grads::for_store(&m.params);
        tape.backward(&m, &mut g).unwrap();
        m.params.load_grads(&g);
        opt.step(&mut m.params).unwrap();
        losses.push(loss);
    }
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn decoder_is_causal() {
    let m = Model::<f64>::new(tiny_config(), tiny_vocab(), 6).unwrap();
    let mem = m.encode(&features::<f64>(6, 5, 2)).unwrap();
    let ids = m.vocab.vocab_ids().to_vec();
    let v = m.base_view();
    let a = [SOT, m.vocab.lid("aa").unwrap(), ids[0], ids[1], ids[2]];
    let mut b = a;
    b[3] = ids[4];
    b[4] = ids[5];
    let la = m.decoder_logits(&mem, &a, &v).unwrap();
    let lb = m.decoder_logits(&mem, &b, &v).unwrap();
    for r in 0..3 {
        assert_eq!(la.row(r), lb.row(r));
    }
    assert_ne!(la.row(3), lb.row(3));
}

#[test]
fn incremental_steps_match_full_forward() {
    let (m, ids) = model_with_table::<f64>(tiny_config());
    let mem = m.encode(&features::<f64>(6, 5, 2)).unwrap();
    let v = m.view("cc").unwrap();
    let prefix = [SOT, m.vocab.lid("cc").unwrap(), ids[0], ids[2], ids[1]];
    let full = m.decoder_logits(&mem, &prefix, &v).unwrap();
    let kv = m.cross_kv(&mem).unwrap();
    let wview = v.materialize(&m.params);
    let mut state = m.start_state();
    for (p, &tok) in prefix.iter().enumerate() {
        let row = m.step(&kv, &mut state, v.local(tok).unwrap(), &wview).unwrap();
        for (a, b) in row.iter().zip(full.row(p)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert_eq!(state.len(), prefix.len());
}

#[test]
fn projection_consistency_with_restricted_base() {
    // A freshly spawned table is a copy of base columns, so the language view
    // and the base table restricted to the same tokens are the same function.
    let (m, ids) = model_with_table::<f64>(tiny_config());
    let mem = m.encode(&features::<f64>(6, 5, 8)).unwrap();
    let t = target(&m, "cc", &[ids[1], ids[0], ids[2]]);
    let own = m.view("cc").unwrap();
    let restricted = m.embedding.restricted_base_view(&m.vocab, &ids).unwrap();
    let a = m.sequence_loss(&mem, &t, &own).unwrap();
    let b = m.sequence_loss(&mem, &t, &restricted).unwrap();
    assert_eq!(a, b);
}

#[test]
fn new_language_gets_small_lid_column() {
    let mut m = Model::<f32>::new(tiny_config(), tiny_vocab(), 7).unwrap();
    let before = m.params.value(m.embedding.st).clone();
    let id = m.add_language("cc", 1).unwrap();
    let st = m.params.value(m.embedding.st);
    assert_eq!(st.cols(), before.cols() + 1);
    assert_eq!(st.col_slice(0, before.cols()), before);
    assert_eq!(m.vocab.lid("cc").unwrap(), id);
    assert!(st.column(before.cols()).iter().all(|v| v.abs() < 0.2));
    assert!(!m.is_pretrained("cc") && m.is_pretrained("aa"));
}

#[test]
fn a_language_view_only_touches_its_own_table_and_st() {
    let (mut m, ids) = model_with_table::<f64>(tiny_config());
    m.add_language("dd", 4).unwrap();
    let other: Vec<TokenId> = ["b", "d"].iter().map(|t| m.vocab.id_of(t).unwrap()).collect();
    m.spawn_language_table("dd", &[other]).unwrap();
    let x = features::<f64>(6, 5, 9);
    let mut g = Grads::for_store(&m.params);
    let mut tape = LossTape::new();
    tape.forward(&m, Source::Features(&x), &target(&m, "cc", &[ids[1], ids[2]]), &m.view("cc").unwrap())
        .unwrap();
    tape.backward(&m, &mut g).unwrap();
    let nonzero = |name: &str| {
        let id = m.params.id(name).unwrap();
        g.get(id).is_some_and(|d| d.data().iter().any(|v| *v != 0.0))
    };
    assert!(nonzero(&lang_table_name("cc")));
    assert!(nonzero(ST_NAME));
    assert!(!nonzero(&lang_table_name("dd")));
    assert!(!nonzero(BASE_NAME));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (mut m, _) = model_with_table::<f32>(tiny_config());
    m.embedding.st_frozen = true;
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    save_checkpoint(&m, &p1).unwrap();
    let loaded: Model<f32> = load_checkpoint(&p1).unwrap();
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.vocab, m.vocab);
    assert_eq!(loaded.pretrained, m.pretrained);
    assert!(loaded.embedding.st_frozen);
    assert_eq!(loaded.embedding.table("cc"), m.embedding.table("cc"));
    assert_eq!(loaded.encoder_hash(), m.encoder_hash());
    let x = features::<f32>(6, 5, 1);
    let mem = m.encode(&x).unwrap();
    assert_eq!(mem, loaded.encode(&x).unwrap());
    let prefix = [SOT, m.vocab.lid("cc").unwrap()];
    let v = m.view("cc").unwrap();
    assert_eq!(
        m.decode_step(&mem, &prefix, &v).unwrap(),
        loaded.decode_step(&mem, &prefix, &loaded.view("cc").unwrap()).unwrap()
    );
}

#[test]
fn checkpoint_rejects_corruption() {
    let m = Model::<f32>::new(tiny_config(), tiny_vocab(), 7).unwrap();
    let bytes = Checkpoint::from_model(&m).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(matches!(
        Checkpoint::load(std::path::Path::new("/nonexistent/ckpt.bin")),
        Err(Error::MissingArtifact(_))
    ));
}
