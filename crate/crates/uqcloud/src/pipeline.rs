//! Training and evaluation over whole scenes, with per-block parallelism.

use rayon::prelude::*;

use uqcloud_core::arch::SegNet;
use uqcloud_core::datapipe::{assemble_predictions, evaluation_blocks, training_blocks, Block, PointCloud};
use uqcloud_core::inference::SampleStack;
use uqcloud_core::trainer::{block_samples, init_network, train, EpochLog, TrainEvent};
use uqcloud_core::RngStream;

use crate::settings::Settings;
use crate::{Error, Result};

pub const THREADS_ENV: &str = "UQCLOUD_THREADS";

/// Sizes the global worker pool from `threads`, else `UQCLOUD_THREADS`,
/// else the number of CPUs. Results do not depend on the pool size.
pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::setting(THREADS_ENV, format!("`{v}` is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::setting("threads", "must be positive"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// One more than the largest label of any scene.
pub fn infer_classes(scenes: &[PointCloud]) -> Result<usize> {
    let mut max = None;
    for s in scenes {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::format(&s.source, "scene has no labels"))?;
        max = max.max(labels.iter().max().copied());
    }
    let classes = max.map_or(0, |m| m as usize + 1);
    if classes < 2 {
        return Err(uqcloud_core::Error::Config("training data needs at least 2 classes".into()).into());
    }
    Ok(classes)
}

/// Blocks of every scene in order, cut with `RngStream::new(seed).split(2)`.
pub fn cut_training_blocks(settings: &Settings, scenes: &[PointCloud]) -> Result<Vec<Block>> {
    let mut rng = RngStream::new(settings.train.seed).split(2);
    let mut blocks = Vec::new();
    for s in scenes {
        blocks.extend(training_blocks(s, settings.block_size, settings.stride, &mut rng)?);
    }
    Ok(blocks)
}

pub fn train_network(
    settings: &Settings,
    scenes: &[PointCloud],
    classes: usize,
    observer: &mut dyn FnMut(TrainEvent<'_, f32>) -> uqcloud_core::Result<()>,
) -> Result<(SegNet<f32>, Vec<EpochLog>)> {
    settings.validate()?;
    for s in scenes {
        s.validate(Some(classes))?;
    }
    let blocks = cut_training_blocks(settings, scenes)?;
    let mut net = init_network::<f32>(&settings.train, classes)?;
    let logs = train(&settings.train, &mut net, &blocks, observer)?;
    Ok((net, logs))
}

/// Per-point sample stack of a cloud. Blocks are cut with `rng.split(0)`
/// and all share the Monte-Carlo stream `rng.split(1)`, so the result is
/// the same for any number of workers.
pub fn predict_scene(
    net: &SegNet<f32>,
    cloud: &PointCloud,
    block_size: f64,
    samples: usize,
    rng: &RngStream,
) -> Result<SampleStack> {
    let blocks = evaluation_blocks(cloud, block_size, &mut rng.split(0))?;
    let mc = rng.split(1);
    let stacks = blocks
        .par_iter()
        .map(|b| block_samples(net, b, samples, &mc))
        .collect::<uqcloud_core::Result<Vec<_>>>()?;
    Ok(assemble_predictions(cloud.len(), &blocks, &stacks)?.with_regime(net.regime()))
}
