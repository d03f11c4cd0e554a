use std::collections::{BTreeMap, HashMap, HashSet};

use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::io::{read_json, read_jsonl, write_json, write_jsonl};
use super::split::{patient_split, Split};
use super::{Pipeline, PipelineError, Stage};
use crate::config::ProviderConfig;
use crate::encoding::{build_montage, encode_volume, plan_slices, Plane};
use crate::eval::{
    bidirectional_retrieval, bleu_sentence, classify_metrics, label_consistency, monte_carlo_within1, prevalence,
    probe_fit, random_mrr, random_recall, rouge_l_f1, ClassifyReport, ConsistencyReport, EquivalenceClasses,
    RetrievalReport,
};
use crate::labeler::{
    consensus_with_failures, normalize_impression, rule_classify, vote_batch, ActivityLabel, Confidence, ReportDoc,
    RuleLexicon, Vote,
};
use crate::rag::{assemble_prompt, generate_with_filter, retrieve, EmbeddingIndex, GenerationRequest};
use crate::repr::{
    embed_slices, text_key, FileSliceStore, FileTextStore, SliceRecord, TextEmbedder, TextRecord, ToyTextEncoder,
    ToyVisionEncoder,
};
use crate::train::{load_checkpoint, mix_seed, save_checkpoint, train, FrozenBases, ModelParams, StudyFeatures};
use crate::volume::{read_manifest, resample_isotropic, write_container, write_manifest, ManifestEntry, MIN_SLICES};

const TOY_VISION_SEED: u64 = 11;
const TOY_TEXT_SEED: u64 = 12;
const SPLIT_STREAM: u64 = 0x5350_4c49;
const MONTE_CARLO_STREAM: u64 = 0x4d43;

fn fail<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Failed {
        stage,
        message: e.to_string(),
    }
}

fn invalid(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(e.to_string())
}

pub(super) fn run(p: &Pipeline, stage: Stage) -> Result<(), PipelineError> {
    match stage {
        Stage::Ingest => ingest(p),
        Stage::Label => label(p),
        Stage::Encode => encode(p),
        Stage::Train => train_stage(p),
        Stage::EvalRetrieval => eval_retrieval(p),
        Stage::EvalClassify => eval_classify(p),
        Stage::Rag => rag(p),
        Stage::GenEval => gen_eval(p),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IngestSummary {
    studies: usize,
    excluded: Vec<String>,
    voxel_mm: f64,
}

fn ingest(p: &Pipeline) -> Result<(), PipelineError> {
    let cfg = p.config();
    let dir = p.stage_dir(Stage::Ingest);
    let entries = read_manifest(&cfg.paths.manifest).map_err(invalid)?;
    let mut seen = HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !seen.insert(e.study_id.as_str())) {
        return Err(invalid(format!("duplicate study id {}", dup.study_id)));
    }
    let vol_dir = dir.join("volumes");
    super::io::create_dir(&vol_dir)?;
    let results = crate::parallel::try_map(&entries, |e| -> Result<Option<ManifestEntry>, PipelineError> {
        let v = e.load().map_err(invalid)?;
        if v.axial_len() < MIN_SLICES {
            log::warn!("{}: {} axial slices, below {MIN_SLICES}; excluded", e.study_id, v.axial_len());
            return Ok(None);
        }
        let v = resample_isotropic(&v, cfg.voxel_mm).map_err(fail(Stage::Ingest))?;
        let (header_path, payload_path) = write_container(&vol_dir, &v).map_err(fail(Stage::Ingest))?;
        Ok(Some(ManifestEntry {
            study_id: e.study_id.clone(),
            header_path,
            payload_path,
            patient_id: Some(e.patient().to_string()),
        }))
    })?;
    let excluded: Vec<String> = entries
        .iter()
        .zip(&results)
        .filter(|(_, r)| r.is_none())
        .map(|(e, _)| e.study_id.clone())
        .collect();
    let kept: Vec<ManifestEntry> = results.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(invalid("no study passed the slice-count filter"));
    }
    write_manifest(&dir.join("manifest.jsonl"), &kept).map_err(fail(Stage::Ingest))?;
    write_json(
        &dir.join("summary.json"),
        &IngestSummary {
            studies: kept.len(),
            excluded,
            voxel_mm: cfg.voxel_mm,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub study_id: String,
    pub label: ActivityLabel,
    /// `rules`, `consensus`, or `rules_fallback` when the teachers abstain.
    pub source: String,
    pub rule_label: ActivityLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub votes: Vec<Vote>,
}

#[derive(Debug, Clone, Deserialize)]
struct ReferenceLabel {
    study_id: String,
    label: ActivityLabel,
}

fn load_reports(p: &Pipeline) -> Result<Vec<ReportDoc>, PipelineError> {
    read_jsonl(&p.config().paths.reports)
}

fn label(p: &Pipeline) -> Result<(), PipelineError> {
    let dir = p.stage_dir(Stage::Label);
    let docs = load_reports(p)?;
    let lex = RuleLexicon::bundled();
    let rules: Vec<ActivityLabel> = crate::parallel::map(&docs, |d| rule_classify(d, lex).0);
    let votes: Vec<Vec<Vote>> = if p.teachers.is_empty() {
        vec![Vec::new(); docs.len()]
    } else {
        let per_teacher: Vec<Vec<Option<ActivityLabel>>> = p
            .teachers
            .iter()
            .map(|t| {
                vote_batch(&docs, t.client.as_ref(), p.config().labeling.max_in_flight)
                    .into_iter()
                    .map(|r| r.map_err(|e| log::warn!("teacher {}: {e}", t.name)).ok())
                    .collect()
            })
            .collect();
        (0..docs.len())
            .map(|i| {
                p.teachers
                    .iter()
                    .zip(&per_teacher)
                    .map(|(t, v)| Vote {
                        teacher: t.name.clone(),
                        label: v[i],
                    })
                    .collect()
            })
            .collect()
    };
    let mut rows = Vec::with_capacity(docs.len());
    for ((doc, rule_label), votes) in docs.iter().zip(rules).zip(votes) {
        let row = if votes.is_empty() {
            LabelRow {
                study_id: doc.study_id.clone(),
                label: rule_label,
                source: "rules".into(),
                rule_label,
                confidence: None,
                votes,
            }
        } else {
            let c = consensus_with_failures(votes).map_err(fail(Stage::Label))?;
            LabelRow {
                study_id: doc.study_id.clone(),
                label: c.label.unwrap_or(rule_label),
                source: if c.label.is_some() { "consensus" } else { "rules_fallback" }.into(),
                rule_label,
                confidence: Some(c.confidence),
                votes: c.votes,
            }
        };
        rows.push(row);
    }
    write_jsonl(&dir.join("labels.jsonl"), &rows)?;
    if let Some(path) = &p.config().paths.labels {
        let reference: HashMap<String, ActivityLabel> = read_jsonl::<ReferenceLabel>(path)?
            .into_iter()
            .map(|r| (r.study_id, r.label))
            .collect();
        let (pred, truth): (Vec<_>, Vec<_>) = rows
            .iter()
            .filter_map(|r| reference.get(&r.study_id).map(|&t| (r.label, t)))
            .unzip();
        if !pred.is_empty() {
            let report = classify_metrics(&pred, &truth).map_err(fail(Stage::Label))?;
            write_json(&dir.join("agreement.json"), &report)?;
        }
    }
    Ok(())
}

/// One encoded study: planned slice positions and its impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub study_id: String,
    pub patient_id: String,
    pub impression: String,
    pub slices: Vec<(Plane, usize)>,
    pub header_path: std::path::PathBuf,
    pub payload_path: std::path::PathBuf,
}

fn encode(p: &Pipeline) -> Result<(), PipelineError> {
    let cfg = p.config();
    let dir = p.stage_dir(Stage::Encode);
    let entries = read_manifest(&p.stage_dir(Stage::Ingest).join("manifest.jsonl")).map_err(invalid)?;
    let reports: HashMap<String, ReportDoc> = load_reports(p)?.into_iter().map(|d| (d.study_id.clone(), d)).collect();
    let mut studies = Vec::with_capacity(entries.len());
    for e in &entries {
        let doc = reports
            .get(&e.study_id)
            .ok_or_else(|| invalid(format!("study {} has no report", e.study_id)))?;
        studies.push((e, normalize_impression(&doc.impression)));
    }
    let mut slice_store = FileSliceStore::default();
    let mut text_store = FileTextStore::default();
    let mut rows = Vec::with_capacity(studies.len());
    let unique_texts: Vec<String> = studies
        .iter()
        .map(|(_, t)| t.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    match &cfg.providers {
        ProviderConfig::Toy { dim, rank } => {
            let vision = ToyVisionEncoder::new(*dim, *rank, TOY_VISION_SEED).map_err(fail(Stage::Encode))?;
            let text = ToyTextEncoder::new(*dim, *rank, TOY_TEXT_SEED).map_err(fail(Stage::Encode))?;
            for (e, impression) in &studies {
                let v = e.load().map_err(invalid)?;
                let slices = encode_volume(&v, &cfg.encoding, cfg.seed).map_err(fail(Stage::Encode))?;
                let embs = embed_slices(&vision, &e.study_id, &slices).map_err(fail(Stage::Encode))?;
                for (s, emb) in slices.iter().zip(embs) {
                    slice_store
                        .insert(SliceRecord {
                            study_id: e.study_id.clone(),
                            plane: s.plane,
                            index: s.index,
                            values: emb.values.to_vec(),
                        })
                        .map_err(fail(Stage::Encode))?;
                }
                rows.push(study_row(e, impression, slices.iter().map(|s| (s.plane, s.index)).collect()));
            }
            for t in &unique_texts {
                let emb = text.embed_text(t).map_err(fail(Stage::Encode))?;
                text_store
                    .insert(TextRecord {
                        key: text_key(t),
                        values: emb.values.to_vec(),
                    })
                    .map_err(fail(Stage::Encode))?;
            }
        }
        ProviderConfig::Files { slices, texts } => {
            let src_slices = FileSliceStore::load(slices).map_err(invalid)?;
            let src_texts = FileTextStore::load(texts).map_err(invalid)?;
            for (e, impression) in &studies {
                let header: crate::volume::ContainerHeader = read_json(&e.header_path)?;
                let plan = plan_slices(header.dims, &cfg.encoding, cfg.seed);
                for &(plane, index) in &plan {
                    let values = src_slices.get(&e.study_id, plane, index).ok_or_else(|| {
                        invalid(format!("no slice embedding for {}/{}/{index}", e.study_id, plane.name()))
                    })?;
                    slice_store
                        .insert(SliceRecord {
                            study_id: e.study_id.clone(),
                            plane,
                            index,
                            values: values.to_vec(),
                        })
                        .map_err(invalid)?;
                }
                rows.push(study_row(e, impression, plan));
            }
            for t in &unique_texts {
                let key = text_key(t);
                let values = src_texts
                    .get(&key)
                    .ok_or_else(|| invalid(format!("no text embedding for {t:?}")))?;
                text_store
                    .insert(TextRecord {
                        key,
                        values: values.to_vec(),
                    })
                    .map_err(invalid)?;
            }
        }
    }
    slice_store.save(&dir.join("slices.jsonl")).map_err(fail(Stage::Encode))?;
    text_store.save(&dir.join("texts.jsonl")).map_err(fail(Stage::Encode))?;
    write_jsonl(&dir.join("studies.jsonl"), &rows)
}

fn study_row(e: &ManifestEntry, impression: &str, slices: Vec<(Plane, usize)>) -> StudyRow {
    StudyRow {
        study_id: e.study_id.clone(),
        patient_id: e.patient().to_string(),
        impression: impression.to_string(),
        slices,
        header_path: e.header_path.clone(),
        payload_path: e.payload_path.clone(),
    }
}

/// Everything downstream stages need from encode, label and train.
struct Workspace {
    studies: Vec<StudyRow>,
    features: Vec<StudyFeatures>,
    labels: HashMap<String, ActivityLabel>,
    bases: FrozenBases,
}

impl Workspace {
    fn load(p: &Pipeline) -> Result<Self, PipelineError> {
        let enc = p.stage_dir(Stage::Encode);
        let studies: Vec<StudyRow> = read_jsonl(&enc.join("studies.jsonl"))?;
        let slices = FileSliceStore::load(&enc.join("slices.jsonl")).map_err(invalid)?;
        let texts = FileTextStore::load(&enc.join("texts.jsonl")).map_err(invalid)?;
        let model = &p.config().model;
        let mut features = Vec::with_capacity(studies.len());
        for s in &studies {
            let mut m = Array2::zeros((s.slices.len(), model.vision_in));
            for (r, &(plane, index)) in s.slices.iter().enumerate() {
                let v = slices
                    .get(&s.study_id, plane, index)
                    .ok_or_else(|| invalid(format!("encode output lacks {}/{}/{index}", s.study_id, plane.name())))?;
                if v.len() != model.vision_in {
                    return Err(invalid(format!("slice embeddings have dim {}, model expects {}", v.len(), model.vision_in)));
                }
                m.row_mut(r).assign(v);
            }
            let t = texts
                .get(&text_key(&s.impression))
                .ok_or_else(|| invalid(format!("encode output lacks text for {}", s.study_id)))?;
            if t.len() != model.text_in {
                return Err(invalid(format!("text embeddings have dim {}, model expects {}", t.len(), model.text_in)));
            }
            features.push(StudyFeatures {
                study_id: s.study_id.clone(),
                slices: m,
                text: t.clone(),
                impression: s.impression.clone(),
            });
        }
        let labels = read_jsonl::<LabelRow>(&p.stage_dir(Stage::Label).join("labels.jsonl"))?
            .into_iter()
            .map(|r| (r.study_id, r.label))
            .collect();
        Ok(Self {
            studies,
            features,
            labels,
            bases: FrozenBases::identity(model.dim),
        })
    }

    fn label_of(&self, study_id: &str) -> Result<ActivityLabel, PipelineError> {
        self.labels
            .get(study_id)
            .copied()
            .ok_or_else(|| invalid(format!("study {study_id} has no label")))
    }

    fn subset(&self, ids: &[String]) -> Vec<&StudyFeatures> {
        let pos: HashMap<&str, usize> = self.features.iter().enumerate().map(|(i, f)| (f.study_id.as_str(), i)).collect();
        ids.iter().map(|id| &self.features[pos[id.as_str()]]).collect()
    }

    fn split(p: &Pipeline) -> Result<Split, PipelineError> {
        read_json(&p.stage_dir(Stage::Train).join("split.json"))
    }

    /// Initial and trained parameters, in that order.
    fn models(p: &Pipeline) -> Result<Vec<(&'static str, ModelParams)>, PipelineError> {
        let (trained, _) = load_checkpoint(&p.stage_dir(Stage::Train).join("model.ckpt")).map_err(fail(Stage::Train))?;
        let initial = ModelParams::init(&p.config().model, mix_seed(p.config().train.seed, 0)).map_err(fail(Stage::Train))?;
        Ok(vec![("initial", initial), ("trained", trained)])
    }

    fn embed(
        &self,
        params: &ModelParams,
        set: &[&StudyFeatures],
        stage: Stage,
    ) -> Result<(Array2<f64>, Array2<f64>), PipelineError> {
        let d = params.projector.dim();
        let rows = crate::parallel::try_map(set, |f| {
            Ok::<_, crate::repr::ReprError>((
                params.embed_volume(&self.bases, f.slices.view())?,
                params.embed_text(&self.bases, f.text.view())?,
            ))
        })
        .map_err(fail(stage))?;
        let mut v = Array2::zeros((set.len(), d));
        let mut t = Array2::zeros((set.len(), d));
        for (i, (a, b)) in rows.into_iter().enumerate() {
            v.row_mut(i).assign(&a);
            t.row_mut(i).assign(&b);
        }
        Ok((v, t))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainSummary {
    best_epoch: usize,
    stopped_early: bool,
    initial_val_loss: f64,
    best_val_loss: f64,
    train_studies: usize,
    val_studies: usize,
    test_studies: usize,
}

fn train_stage(p: &Pipeline) -> Result<(), PipelineError> {
    let cfg = p.config();
    let dir = p.stage_dir(Stage::Train);
    let ws = Workspace::load(p)?;
    let items = ws
        .studies
        .iter()
        .map(|s| Ok((s.study_id.clone(), s.patient_id.clone(), ws.label_of(&s.study_id)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let fractions = [cfg.split.train, cfg.split.val, cfg.split.test];
    let split = patient_split(&items, fractions, mix_seed(cfg.seed, SPLIT_STREAM));
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(invalid(format!(
            "split of {} studies leaves an empty part ({}/{}/{})",
            items.len(),
            split.train.len(),
            split.val.len(),
            split.test.len()
        )));
    }
    write_json(&dir.join("split.json"), &split)?;
    let owned = |ids: &[String]| ws.subset(ids).into_iter().cloned().collect::<Vec<_>>();
    let (tr, va) = (owned(&split.train), owned(&split.val));
    let outcome = train(&tr, &va, &ws.bases, &cfg.model, &cfg.train, Some(&dir.join("history.jsonl"))).map_err(fail(Stage::Train))?;
    save_checkpoint(&dir.join("model.ckpt"), &outcome.best, &cfg.model, cfg.train.seed, outcome.best_epoch).map_err(fail(Stage::Train))?;
    write_json(
        &dir.join("summary.json"),
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
            initial_val_loss: outcome.history[0].val_loss,
            best_val_loss: outcome.history[outcome.best_epoch].val_loss,
            train_studies: split.train.len(),
            val_studies: split.val.len(),
            test_studies: split.test.len(),
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct RetrievalOutput {
    pub queries: usize,
    pub models: Vec<(String, RetrievalReport)>,
    pub random_recall_at: BTreeMap<usize, f64>,
    pub random_mrr: f64,
}

fn eval_retrieval(p: &Pipeline) -> Result<(), PipelineError> {
    let ws = Workspace::load(p)?;
    let split = Workspace::split(p)?;
    let test = ws.subset(&split.test);
    let impressions: Vec<&str> = test.iter().map(|f| f.impression.as_str()).collect();
    let classes = EquivalenceClasses::from_impressions(&impressions);
    let mut models = Vec::new();
    for (name, params) in Workspace::models(p)? {
        let (v, t) = ws.embed(&params, &test, Stage::EvalRetrieval)?;
        let sim = v.dot(&t.t());
        let report = bidirectional_retrieval(sim.view(), &classes, &p.config().eval.ks).map_err(fail(Stage::EvalRetrieval))?;
        models.push((name.to_string(), report));
    }
    let out = RetrievalOutput {
        queries: test.len(),
        models,
        random_recall_at: p.config().eval.ks.iter().map(|&k| (k, random_recall(&classes, k))).collect(),
        random_mrr: random_mrr(&classes),
    };
    write_json(&p.stage_dir(Stage::EvalRetrieval).join("retrieval.json"), &out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct ClassifyOutput {
    pub test_studies: usize,
    pub models: Vec<(String, ClassifyReport)>,
    pub test_prevalence: [f64; 3],
}

fn eval_classify(p: &Pipeline) -> Result<(), PipelineError> {
    let ws = Workspace::load(p)?;
    let split = Workspace::split(p)?;
    let (train_set, test_set) = (ws.subset(&split.train), ws.subset(&split.test));
    let labels = |set: &[&StudyFeatures]| set.iter().map(|f| ws.label_of(&f.study_id)).collect::<Result<Vec<_>, _>>();
    let (y_train, y_test) = (labels(&train_set)?, labels(&test_set)?);
    let mut models = Vec::new();
    for (name, params) in Workspace::models(p)? {
        let (x_train, _) = ws.embed(&params, &train_set, Stage::EvalClassify)?;
        let (x_test, _) = ws.embed(&params, &test_set, Stage::EvalClassify)?;
        let probe = probe_fit(x_train.view(), &y_train, &p.config().eval.probe).map_err(fail(Stage::EvalClassify))?;
        if !probe.converged {
            log::warn!("probe on {name} embeddings stopped before converging");
        }
        let report = classify_metrics(&probe.predict_all(x_test.view()), &y_test).map_err(fail(Stage::EvalClassify))?;
        models.push((name.to_string(), report));
    }
    let out = ClassifyOutput {
        test_studies: test_set.len(),
        models,
        test_prevalence: prevalence(&y_test),
    };
    write_json(&p.stage_dir(Stage::EvalClassify).join("classify.json"), &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(super) struct GenerationRow {
    pub study_id: String,
    pub retrieved: Vec<String>,
    pub similarities: Vec<f64>,
    pub text: String,
    /// `generator` or `nearest_neighbor`.
    pub source: String,
    pub degraded: bool,
    pub rounds: u32,
    pub prompt: String,
}

fn montage_png_base64(row: &StudyRow, p: &Pipeline) -> Result<String, PipelineError> {
    let v = crate::volume::read_container(&row.header_path, &row.payload_path).map_err(invalid)?;
    let img = build_montage(&v, &p.config().rag.montage, None, p.config().seed).map_err(fail(Stage::Rag))?;
    let mut bytes = Vec::new();
    img.to_rgb8()
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(fail(Stage::Rag))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn rag(p: &Pipeline) -> Result<(), PipelineError> {
    let cfg = p.config();
    let ws = Workspace::load(p)?;
    let split = Workspace::split(p)?;
    let (_, trained) = Workspace::models(p)?.pop().expect("trained model present");
    let (train_set, test_set) = (ws.subset(&split.train), ws.subset(&split.test));
    let (iv, it) = ws.embed(&trained, &train_set, Stage::Rag)?;
    let index = EmbeddingIndex::new(
        iv,
        it,
        train_set.iter().map(|f| f.study_id.clone()).collect(),
        train_set.iter().map(|f| f.impression.clone()).collect(),
    )
    .map_err(fail(Stage::Rag))?;
    let (qv, _) = ws.embed(&trained, &test_set, Stage::Rag)?;
    let rows_by_id: HashMap<&str, &StudyRow> = ws.studies.iter().map(|s| (s.study_id.as_str(), s)).collect();
    let queries: Vec<usize> = (0..test_set.len()).collect();
    let rows = crate::parallel::try_map(&queries, |&i| -> Result<GenerationRow, PipelineError> {
        let f = test_set[i];
        let hits = retrieve(&index, qv.row(i), &cfg.rag.mmr).map_err(fail(Stage::Rag))?;
        let prompt = assemble_prompt(&hits, "");
        let (text, source, degraded, rounds) = match &p.generator {
            Some(client) => {
                let mut req = GenerationRequest::new(prompt.clone());
                req.decoding = cfg.rag.decoding.clone();
                req.best_of = cfg.rag.best_of;
                req.max_retries = cfg.rag.max_retries;
                if cfg.rag.attach_montage {
                    req.image_png_base64 = Some(montage_png_base64(rows_by_id[f.study_id.as_str()], p)?);
                }
                let g = generate_with_filter(&req, client.as_ref()).map_err(fail(Stage::Rag))?;
                (g.text, "generator", g.degraded, g.rounds)
            }
            None => (hits[0].impression.clone(), "nearest_neighbor", false, 0),
        };
        Ok(GenerationRow {
            study_id: f.study_id.clone(),
            retrieved: hits.iter().map(|h| h.study_id.clone()).collect(),
            similarities: hits.iter().map(|h| h.similarity).collect(),
            text,
            source: source.into(),
            degraded,
            rounds,
            prompt: prompt.user,
        })
    })?;
    write_jsonl(&p.stage_dir(Stage::Rag).join("generations.jsonl"), &rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(super) struct GenerationOutput {
    pub studies: usize,
    pub degraded: usize,
    pub rouge_l: f64,
    pub bleu: f64,
    pub consistency: ConsistencyReport,
    pub simulated_within1: f64,
}

fn gen_eval(p: &Pipeline) -> Result<(), PipelineError> {
    let ws = Workspace::load(p)?;
    let rows: Vec<GenerationRow> = read_jsonl(&p.stage_dir(Stage::Rag).join("generations.jsonl"))?;
    if rows.is_empty() {
        return Err(invalid("no generations to evaluate"));
    }
    let refs: HashMap<&str, &str> = ws.features.iter().map(|f| (f.study_id.as_str(), f.impression.as_str())).collect();
    let mut rouge = 0.0;
    let mut bleu = 0.0;
    let mut truth = Vec::with_capacity(rows.len());
    for r in &rows {
        let reference = refs
            .get(r.study_id.as_str())
            .ok_or_else(|| invalid(format!("generation for unknown study {}", r.study_id)))?;
        rouge += rouge_l_f1(&r.text, reference);
        bleu += bleu_sentence(&r.text, reference);
        truth.push(ws.label_of(&r.study_id)?);
    }
    let n = rows.len() as f64;
    let generated: Vec<String> = rows.iter().map(|r| r.text.clone()).collect();
    let consistency = label_consistency(&generated, &truth, RuleLexicon::bundled()).map_err(fail(Stage::GenEval))?;
    let prev = prevalence(&truth);
    let cfg = p.config();
    let out = GenerationOutput {
        studies: rows.len(),
        degraded: rows.iter().filter(|r| r.degraded).count(),
        rouge_l: rouge / n,
        bleu: bleu / n,
        consistency,
        simulated_within1: monte_carlo_within1(prev, prev, cfg.eval.monte_carlo_draws.max(1), mix_seed(cfg.seed, MONTE_CARLO_STREAM)),
    };
    write_json(&p.stage_dir(Stage::GenEval).join("generation.json"), &out)
}
