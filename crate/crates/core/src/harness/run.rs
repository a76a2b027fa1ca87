use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataSourceKind, DescriptorSourceKind, RunConfig, Variant};
use super::stream::{make_task_stream, TaskStream};
use crate::descriptors::{attach_embeddings, load_bank, DescriptorBank};
use crate::encoders::{generate_world, load_embedding_bank, MapTextEncoder, Sample, Split, World};
use crate::error::{Error, Result};
use crate::linalg::cosine_similarity;
use crate::matching::{build_hierarchy, ClassTables, HierarchyCache, HierarchyEmbeddings, MatchConfig};
use crate::replay::{fit_stats, mix_replay_batch, BatchItem, ClassReplayStats, ReplaySampler};
use crate::rng;
use crate::router::{fuse, loss_and_grads, predict, projected_update, sgd_step, Example, RouterState, Routing, ScoringParams};

/// Features, descriptor tables and template embeddings of every class.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub tables: ClassTables<f64>,
    pub templates: Vec<Vec<f64>>,
    pub num_layers: usize,
    pub dim: usize,
}

fn templates_for(bank: &DescriptorBank, class_names: &[String]) -> Result<Vec<Vec<f64>>> {
    class_names
        .iter()
        .map(|name| {
            bank.get(name)?
                .template_embedding
                .clone()
                .ok_or_else(|| Error::domain(format!("class `{name}` has no template embedding")))
        })
        .collect()
}

impl Dataset {
    pub fn from_world(world: &World) -> Result<Self> {
        let class_names = world.truth.class_names.clone();
        Self::assemble(world.samples.clone(), class_names, &world.bank)
    }

    fn assemble(samples: Vec<Sample>, class_names: Vec<String>, bank: &DescriptorBank) -> Result<Self> {
        let tables = ClassTables::from_bank(bank, &class_names)?;
        let templates = templates_for(bank, &class_names)?;
        let first = samples
            .first()
            .ok_or_else(|| Error::domain("dataset has no samples"))?;
        let (num_layers, dim) = (first.features.num_layers(), first.features.dim());
        for (c, name) in class_names.iter().enumerate() {
            let table = tables.class(c).unwrap_or_default();
            if let Some(z) = table.iter().find(|z| z.len() != dim) {
                return Err(Error::domain(format!(
                    "class `{name}`: descriptor embeddings have dimension {}, features have {dim}",
                    z.len()
                )));
            }
        }
        Ok(Dataset {
            samples,
            class_names,
            tables,
            templates,
            num_layers,
            dim,
        })
    }

    /// Build from the configured data and descriptor sources.
    pub fn load(config: &RunConfig) -> Result<Self> {
        match config.data.source {
            DataSourceKind::World => {
                let world = generate_world(&config.world)?;
                match config.descriptors.source {
                    DescriptorSourceKind::World => Self::from_world(&world),
                    DescriptorSourceKind::File => {
                        let bank = load_file_bank(config)?;
                        Self::assemble(world.samples, world.truth.class_names, &bank)
                    }
                }
            }
            DataSourceKind::Bank => {
                let data = load_embedding_bank(&config.data.bank_path)?;
                let bank = load_file_bank(config)?;
                Self::assemble(data.samples, data.class_names, &bank)
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

fn load_file_bank(config: &RunConfig) -> Result<DescriptorBank> {
    let bank = load_bank(&config.descriptors.bank_path)?;
    if bank.classes.values().all(|c| c.is_embedded()) || config.descriptors.encoder_path.as_os_str().is_empty() {
        return Ok(bank);
    }
    let encoder = MapTextEncoder::from_json_file(&config.descriptors.encoder_path)?;
    let (bank, failures) = attach_embeddings(&bank, &encoder);
    if let Some(f) = failures.first() {
        return Err(Error::Encoder(format!(
            "{} classes could not be embedded; first: `{}`: {}",
            failures.len(),
            f.class,
            f.message
        )));
    }
    Ok(bank)
}

/// Everything needed to score samples besides the trainable state.
#[derive(Clone, Debug)]
pub struct Scorer<'a> {
    pub tables: &'a ClassTables<f64>,
    pub templates: &'a [Vec<f64>],
    pub matching: MatchConfig<f64>,
    pub params: ScoringParams<f64>,
}

impl<'a> Scorer<'a> {
    /// Scoring setup of `variant` under `config`.
    pub fn for_variant(config: &RunConfig, dataset: &'a Dataset) -> Result<Self> {
        let variant = config.method.variant;
        let mut layers = config.scoring.layer_subset.resolve(dataset.num_layers)?;
        let (lambda, routing) = match variant {
            Variant::Herman | Variant::NoProjection => (config.scoring.lambda, Routing::Learned),
            Variant::NoRouter => (config.scoring.lambda, Routing::Uniform),
            Variant::FinalLayerOnly | Variant::ZsBaseline => (0.0, Routing::Uniform),
        };
        if variant == Variant::FinalLayerOnly {
            layers = vec![dataset.num_layers - 1];
        }
        Ok(Scorer {
            tables: &dataset.tables,
            templates: &dataset.templates,
            matching: MatchConfig {
                k: config.scoring.k,
                alpha_temperature: config.scoring.alpha_temperature,
                layers,
            },
            params: ScoringParams {
                lambda,
                tau: config.scoring.tau,
                routing,
            },
        })
    }

    pub fn hierarchy(&self, sample: &[Vec<f64>], active: &[usize]) -> Result<HierarchyEmbeddings<f64>> {
        build_hierarchy(sample, self.tables, active, &self.matching)
    }

    fn templates_of(&self, active: &[usize]) -> Vec<Vec<f64>> {
        active.iter().map(|&c| self.templates[c].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`, both indexed by position in the seen-class list.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax accuracy over `seen`; ties go to the lower class index.
pub fn evaluate(state: &RouterState<f64>, scorer: &Scorer<'_>, test: &[&Sample], seen: &[usize]) -> Result<Evaluation> {
    if seen.is_empty() {
        return Err(Error::domain("evaluation needs at least one seen class"));
    }
    if test.is_empty() {
        return Err(Error::domain("no test samples"));
    }
    let position = position_map(seen, scorer.tables.len());
    let templates = scorer.templates_of(seen);
    let predictions: Vec<(usize, usize)> = test
        .par_iter()
        .map(|s| {
            let truth = position.get(s.label).copied().flatten().ok_or_else(|| {
                Error::domain(format!("test sample `{}` has label {} outside the seen classes", s.id, s.label))
            })?;
            let h = scorer.hierarchy(s.features.layers(), seen)?;
            let probs = predict(
                state,
                &scorer.params,
                &Example {
                    x_final: s.features.final_layer(),
                    label: truth,
                    hierarchy: &h,
                    templates: &templates,
                },
            )?;
            if probs.len() != seen.len() {
                return Err(Error::domain("scores do not cover the seen classes"));
            }
            let mut best = 0;
            for k in 1..probs.len() {
                if probs[k] > probs[best] || (probs[k] == probs[best] && seen[k] < seen[best]) {
                    best = k;
                }
            }
            Ok((truth, best))
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; seen.len()]; seen.len()];
    for &(t, p) in &predictions {
        confusion[t][p] += 1;
    }
    let correct = predictions.iter().filter(|(t, p)| t == p).count();
    Ok(Evaluation {
        accuracy: correct as f64 / predictions.len() as f64,
        correct,
        total: predictions.len(),
        confusion,
    })
}

/// Mean cosine between adapted visual features and their own class's mixed text embedding.
pub fn routing_similarity(state: &RouterState<f64>, scorer: &Scorer<'_>, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("routing similarity needs samples"));
    }
    let lambda = scorer.params.lambda;
    let values: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let h = scorer.hierarchy(s.features.layers(), &[s.label])?;
            let x = s.features.final_layer();
            let beta = match scorer.params.routing {
                Routing::Learned => crate::router::route(state, x)?,
                Routing::Uniform => vec![1.0 / h.layers.len() as f64; h.layers.len()],
            };
            let fused = fuse(&h.classes[0].h, &beta)?;
            let e = &scorer.templates[s.label];
            let m: Vec<f64> = fused.iter().zip(e).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            cosine_similarity(&state.w_a.matvec(x), &m)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn position_map(active: &[usize], num_classes: usize) -> Vec<Option<usize>> {
    let mut pos = vec![None; num_classes];
    for (i, &c) in active.iter().enumerate() {
        if c < num_classes {
            pos[c] = Some(i);
        }
    }
    pos
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    /// 1-based.
    pub task: usize,
    pub classes: Vec<usize>,
    pub seen_classes: usize,
    pub accuracy: f64,
    pub routing_similarity: f64,
    pub retained_rank: Option<usize>,
    pub steps: usize,
    pub mean_loss: Option<f64>,
    /// Real samples of this task still held by the driver after it finished.
    pub retained_real_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub final_accuracy: f64,
    pub average_accuracy: f64,
    pub tasks: Vec<TaskReport>,
    pub stream: TaskStream,
    pub config: RunConfig,
    /// Not serialized, so reports of identical configs stay byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn task_csv(&self) -> String {
        let mut out = String::from("task,accuracy,seen_classes,routing_similarity\n");
        for t in &self.tasks {
            out.push_str(&format!("{},{},{},{}\n", t.task, t.accuracy, t.seen_classes, t.routing_similarity));
        }
        out
    }
}

/// Mean of the per-task accuracies.
pub fn average_accuracy(accuracies: &[f64]) -> f64 {
    accuracies.iter().sum::<f64>() / accuracies.len() as f64
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub state: RouterState<f64>,
    pub replay_stats: Vec<ClassReplayStats>,
}

/// Real training samples of the task in progress; emptied when the task ends.
struct TaskBuffer<'a> {
    samples: Vec<&'a Sample>,
}

impl<'a> TaskBuffer<'a> {
    fn release(&mut self) -> usize {
        self.samples.clear();
        self.samples.shrink_to_fit();
        self.samples.len()
    }
}

pub fn run_incremental(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let dataset = Dataset::load(config)?;
    run_with_dataset(config, &dataset)
}

/// Run a configured experiment on an already-assembled dataset.
pub fn run_with_dataset(config: &RunConfig, dataset: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    let started = Instant::now();
    let variant = config.method.variant;
    let stream = make_task_stream(dataset.num_classes(), config.stream.m, config.stream.n, config.stream.shuffle_seed)?;
    let scorer = Scorer::for_variant(config, dataset)?;
    let mut state = RouterState::new(scorer.matching.layers.len(), dataset.dim);
    let mut stats: Vec<ClassReplayStats> = Vec::new();
    let mut reports = Vec::with_capacity(stream.num_tasks());

    let task1_test: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.split == Split::Test && stream.tasks[0].contains(&s.label))
        .collect();

    for (t, classes) in stream.tasks.iter().enumerate() {
        let wrap = |phase: &'static str| move |e: Error| Error::Task { task: t + 1, phase, source: Box::new(e) };
        let seen = stream.seen(t);
        let mut buffer = TaskBuffer {
            samples: dataset
                .samples
                .iter()
                .filter(|s| s.split == Split::Train && classes.contains(&s.label))
                .collect(),
        };

        let w_old = state.w_r.clone();
        let (steps, mean_loss) = if variant.trains() {
            train_task(config, &scorer, &mut state, &buffer.samples, &seen, &stats, t).map_err(wrap("train"))?
        } else {
            (0, None)
        };
        if variant.projects() && t > 0 {
            let p = projected_update(&w_old, &state.w_r, config.projection.rho, config.projection.delta)
                .map_err(wrap("projection"))?;
            state.w_r = p.w_proj;
            state.p_old = p.p_old;
            state.retained_rank = p.retained_rank;
        }
        state.task_counter += 1;

        if config.replay.enabled && variant.trains() {
            for &c in classes {
                let own: Vec<_> = buffer.samples.iter().filter(|s| s.label == c).map(|s| &s.features).collect();
                stats.push(fit_stats(c, &own, config.replay.ridge).map_err(wrap("replay"))?);
            }
        }
        let retained = buffer.release();

        let test: Vec<&Sample> = dataset
            .samples
            .iter()
            .filter(|s| s.split == Split::Test && seen.contains(&s.label))
            .collect();
        let eval = evaluate(&state, &scorer, &test, &seen).map_err(wrap("evaluate"))?;
        let sim = routing_similarity(&state, &scorer, &task1_test).map_err(wrap("diagnostic"))?;
        log::info!(
            "{variant} task {}/{}: accuracy {:.4} over {} classes, routing similarity {sim:.4}",
            t + 1,
            stream.num_tasks(),
            eval.accuracy,
            seen.len()
        );
        reports.push(TaskReport {
            task: t + 1,
            classes: classes.clone(),
            seen_classes: seen.len(),
            accuracy: eval.accuracy,
            routing_similarity: sim,
            retained_rank: state.retained_rank,
            steps,
            mean_loss,
            retained_real_samples: retained,
        });
    }

    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let report = RunReport {
        variant,
        final_accuracy: *accs.last().expect("at least one task"),
        average_accuracy: average_accuracy(&accs),
        tasks: reports,
        stream,
        config: config.clone(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        report,
        state,
        replay_stats: stats,
    })
}

fn train_task(
    config: &RunConfig,
    scorer: &Scorer<'_>,
    state: &mut RouterState<f64>,
    train: &[&Sample],
    seen: &[usize],
    stats: &[ClassReplayStats],
    t: usize,
) -> Result<(usize, Option<f64>)> {
    if train.is_empty() {
        return Err(Error::domain("task has no training samples"));
    }
    let opt = &config.optimizer;
    let position = position_map(seen, scorer.tables.len());
    let templates = scorer.templates_of(seen);

    let mut cache = HierarchyCache::new(seen.to_vec());
    let built: Vec<HierarchyEmbeddings<f64>> = train
        .par_iter()
        .map(|s| scorer.hierarchy(s.features.layers(), seen))
        .collect::<Result<_>>()?;
    for (s, h) in train.iter().zip(built) {
        cache.put(&s.id, h);
    }
    cache.seal();

    let samplers: Vec<ReplaySampler<'_>> = if config.replay.enabled {
        stats.iter().map(ReplaySampler::new).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let steps_per_epoch = train.len().div_ceil(opt.batch_size);
    let total = steps_per_epoch * opt.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::stream(config.root_seed, &format!("train/shuffle/task{}", t + 1));
    let mut replay_rng = rng::stream(config.root_seed, &format!("train/replay/task{}", t + 1));
    let mut step = 0;
    let mut loss_sum = 0.0;

    for _ in 0..opt.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opt.batch_size) {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    label: train[i].label,
                    features: train[i].features.clone(),
                    cache_key: Some(train[i].id.clone()),
                })
                .collect();
            let items = mix_replay_batch(items, &samplers, config.replay.per_class, &mut replay_rng)?;
            let fresh: Vec<Option<HierarchyEmbeddings<f64>>> = items
                .par_iter()
                .map(|it| match it.cache_key.as_deref().and_then(|k| cache.get(k)) {
                    Some(_) => Ok(None),
                    None => scorer.hierarchy(it.features.layers(), seen).map(Some),
                })
                .collect::<Result<_>>()?;
            let batch: Vec<Example<'_, f64>> = items
                .iter()
                .zip(&fresh)
                .map(|(it, f)| {
                    let hierarchy = match f {
                        Some(h) => h,
                        None => cache.get(it.cache_key.as_deref().unwrap_or_default()).expect("cached"),
                    };
                    let label = position[it.label].ok_or_else(|| {
                        Error::domain(format!("training label {} is not among the seen classes", it.label))
                    })?;
                    Ok(Example {
                        x_final: it.features.final_layer(),
                        label,
                        hierarchy,
                        templates: &templates,
                    })
                })
                .collect::<Result<_>>()?;
            let grads = loss_and_grads(state, &scorer.params, &batch)?;
            loss_sum += grads.loss;
            sgd_step(state, &grads, opt.lr_at(step, total), opt.grad_clip);
            step += 1;
        }
    }
    Ok((step, (step > 0).then(|| loss_sum / step as f64)))
}
