//! Point clouds, xy-grid block cutting, resampling to fixed-size blocks,
//! featurization, and the reduction of block predictions back onto the
//! original points.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::inference::SampleStack;
use crate::rng::RngStream;
use crate::{Error, Result, BLOCK_FEATURES, BLOCK_POINTS};

pub const DEFAULT_BLOCK_SIZE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub source: String,
    /// Coordinates in meters.
    pub xyz: Vec<[f32; 3]>,
    pub rgb: Vec<[u8; 3]>,
    /// Per-point class ids, when the cloud is labeled.
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn validate(&self, classes: Option<usize>) -> Result<()> {
        if self.rgb.len() != self.xyz.len() {
            return Err(Error::shape("point cloud colors", &[self.rgb.len()], &[self.xyz.len()]));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.xyz.len() {
                return Err(Error::shape("point cloud labels", &[l.len()], &[self.xyz.len()]));
            }
            if let Some(m) = classes {
                if let Some(&bad) = l.iter().find(|&&c| c as usize >= m) {
                    return Err(Error::LabelOutOfRange {
                        label: bad as usize,
                        classes: m,
                    });
                }
            }
        }
        if self.xyz.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates"));
        }
        Ok(())
    }

    pub fn labels_usize(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().map(|&c| c as usize).collect())
    }
}

/// Axis-aligned xy cells of `block_size` starting at every multiple of
/// `stride` (world origin), full height. Returns the point indices of every
/// non-empty cell, ordered by cell. With `stride == block_size` the cells
/// partition the cloud.
pub fn split_blocks(cloud: &PointCloud, block_size: f64, stride: f64) -> Result<Vec<Vec<usize>>> {
    if !(block_size > 0.0) || !(stride > 0.0) || stride > block_size {
        return Err(Error::Config(alloc::format!(
            "need 0 < stride <= block size, got stride {stride} and block size {block_size}"
        )));
    }
    let partition = stride == block_size;
    let mut grid: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    let mut axis_cells: [Vec<i64>; 2] = [Vec::new(), Vec::new()];
    for (i, p) in cloud.xyz.iter().enumerate() {
        for a in 0..2 {
            let d = p[a] as f64;
            let home = (d / stride).floor() as i64;
            let out = &mut axis_cells[a];
            out.clear();
            if partition {
                out.push(home);
                continue;
            }
            // Cells c with c·stride <= d < c·stride + block_size.
            let first = ((d - block_size) / stride).floor() as i64;
            out.extend((first..home).filter(|&c| d < c as f64 * stride + block_size));
            out.push(home);
        }
        for &cx in &axis_cells[0] {
            for &cy in &axis_cells[1] {
                grid.entry((cx, cy)).or_default().push(i);
            }
        }
    }
    Ok(grid.into_values().collect())
}

/// Exactly [`BLOCK_POINTS`] indices drawn from `indices`: a uniform subset
/// without replacement when there are more, every index once plus uniform
/// draws with replacement when there are fewer.
pub fn resample_to_4096(indices: &[usize], rng: &mut RngStream) -> Result<Vec<usize>> {
    resample(indices, BLOCK_POINTS, rng)
}

fn resample(indices: &[usize], target: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    let n = indices.len();
    if n == 0 {
        return Err(Error::Empty("block"));
    }
    let mut out = indices.to_vec();
    if n > target {
        // Partial Fisher-Yates: the first `target` slots become a uniform subset.
        for i in 0..target {
            let j = i + rng.below(n - i);
            out.swap(i, j);
        }
        out.truncate(target);
    } else {
        while out.len() < target {
            out.push(indices[rng.below(n)]);
        }
    }
    Ok(out)
}

/// Fixed-size network input unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Rows of the source cloud, duplicates allowed.
    pub indices: Vec<usize>,
    /// `rows × 9`: centered xyz, rgb in [0, 1], original xyz.
    pub features: Vec<f32>,
    pub labels: Option<Vec<usize>>,
}

impl Block {
    pub fn rows(&self) -> usize {
        self.indices.len()
    }
}

/// Builds the block features for the given rows.
pub fn featurize(cloud: &PointCloud, indices: &[usize]) -> Result<Block> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::Contract(alloc::format!(
            "index {bad} out of range for a cloud of {} points",
            cloud.len()
        )));
    }
    if indices.is_empty() {
        return Err(Error::Empty("block"));
    }
    let mut centroid = [0.0f64; 3];
    for &i in indices {
        for (c, &v) in centroid.iter_mut().zip(&cloud.xyz[i]) {
            *c += v as f64;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= indices.len() as f64);
    let mut features = Vec::with_capacity(indices.len() * BLOCK_FEATURES);
    for &i in indices {
        let p = cloud.xyz[i];
        for a in 0..3 {
            features.push((p[a] as f64 - centroid[a]) as f32);
        }
        features.extend(cloud.rgb[i].iter().map(|&c| c as f32 / 255.0));
        features.extend_from_slice(&p);
    }
    let labels = cloud
        .labels
        .as_ref()
        .map(|l| indices.iter().map(|&i| l[i] as usize).collect());
    Ok(Block {
        indices: indices.to_vec(),
        features,
        labels,
    })
}

/// One resampled block per non-empty cell (training use).
pub fn training_blocks(cloud: &PointCloud, block_size: f64, stride: f64, rng: &mut RngStream) -> Result<Vec<Block>> {
    split_blocks(cloud, block_size, stride)?
        .iter()
        .map(|cell| featurize(cloud, &resample_to_4096(cell, rng)?))
        .collect()
}

/// Blocks covering every point of the cloud: each cell is shuffled and cut
/// into `⌈n/4096⌉` near-equal chunks, each padded to 4096 rows by repetition.
pub fn evaluation_blocks(cloud: &PointCloud, block_size: f64, rng: &mut RngStream) -> Result<Vec<Block>> {
    let mut blocks = Vec::new();
    for mut cell in split_blocks(cloud, block_size, block_size)? {
        let n = cell.len();
        let chunks = n.div_ceil(BLOCK_POINTS);
        for i in (1..n).rev() {
            cell.swap(i, rng.below(i + 1));
        }
        let mut start = 0;
        for c in 0..chunks {
            let len = n / chunks + usize::from(c < n % chunks);
            let rows = resample(&cell[start..start + len], BLOCK_POINTS, rng)?;
            blocks.push(featurize(cloud, &rows)?);
            start += len;
        }
    }
    Ok(blocks)
}

/// Averages each original point's rows per sample and renormalizes.
/// `stacks[b]` holds the predictions for `blocks[b]`, row for row.
pub fn assemble_predictions(points: usize, blocks: &[Block], stacks: &[SampleStack]) -> Result<SampleStack> {
    if blocks.len() != stacks.len() || blocks.is_empty() {
        return Err(Error::shape("assemble predictions", &[blocks.len()], &[stacks.len()]));
    }
    let (k, m) = (stacks[0].samples(), stacks[0].classes());
    let mut sums = alloc::vec![0.0f64; k * points * m];
    let mut hits = alloc::vec![0u32; points];
    for (block, stack) in blocks.iter().zip(stacks) {
        if stack.samples() != k || stack.classes() != m || stack.points() != block.rows() {
            return Err(Error::shape(
                "assemble predictions",
                &[stack.samples(), stack.points(), stack.classes()],
                &[k, block.rows(), m],
            ));
        }
        for (r, &p) in block.indices.iter().enumerate() {
            if p >= points {
                return Err(Error::Contract(alloc::format!("block row points at {p} of {points}")));
            }
            hits[p] += 1;
            for s in 0..k {
                let dst = &mut sums[(s * points + p) * m..][..m];
                dst.iter_mut().zip(stack.row(s, r)).for_each(|(d, v)| *d += v);
            }
        }
    }
    if let Some(p) = hits.iter().position(|&h| h == 0) {
        return Err(Error::Uncovered(p));
    }
    for row in sums.chunks_exact_mut(m) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    let out = SampleStack::new(k, points, m, sums)?;
    Ok(match stacks[0].regime() {
        Some(r) => out.with_regime(r),
        None => out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cloud(xyz: Vec<[f32; 3]>) -> PointCloud {
        let n = xyz.len();
        PointCloud {
            source: "test".into(),
            xyz,
            rgb: vec![[0, 0, 0]; n],
            labels: Some(vec![0; n]),
        }
    }

    #[test]
    fn one_cube_is_one_block() {
        let c = cloud(vec![[0.1, 0.1, 0.0], [0.4, 0.5, 0.2], [0.3, 0.2, 0.5]]);
        assert_eq!(split_blocks(&c, 1.0, 1.0).unwrap().len(), 1);
    }

    #[test]
    fn two_cells() {
        let c = cloud(vec![[0.5, 0.0, 0.0], [1.5, 0.0, 0.0]]);
        assert_eq!(split_blocks(&c, 1.0, 1.0).unwrap(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn overlapping_cells_cover_everything() {
        let mut r = RngStream::new(4);
        let c = cloud(
            (0..500)
                .map(|_| [(r.uniform() * 3.3) as f32, (r.uniform() * 2.1) as f32, 0.0])
                .collect(),
        );
        let cells = split_blocks(&c, 1.0, 0.5).unwrap();
        let mut seen = vec![0; 500];
        cells.iter().flatten().for_each(|&i| seen[i] += 1);
        assert!(seen.iter().all(|&s| s >= 1));
        assert!(split_blocks(&c, 1.0, 1.5).is_err());
    }

    #[test]
    fn resample_sizes() {
        let mut r = RngStream::new(0);
        assert_eq!(resample_to_4096(&[7], &mut r).unwrap(), vec![7; 4096]);
        let all: Vec<usize> = (0..4096).collect();
        assert_eq!(resample_to_4096(&all, &mut r).unwrap(), all);
        let many: Vec<usize> = (0..10_000).collect();
        let mut s = resample_to_4096(&many, &mut r).unwrap();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 4096);
        assert!(resample_to_4096(&[], &mut r).is_err());
    }

    #[test]
    fn featurize_columns() {
        let mut c = cloud(vec![[1.0, 2.0, 3.0]]);
        c.rgb[0] = [255, 0, 128];
        let b = featurize(&c, &[0; 5]).unwrap();
        assert_eq!(
            &b.features[..9],
            &[0.0, 0.0, 0.0, 1.0, 0.0, 128.0 / 255.0, 1.0, 2.0, 3.0]
        );
        assert_eq!(b.labels, Some(vec![0; 5]));
        assert!(featurize(&c, &[1]).is_err());
    }

    #[test]
    fn evaluation_chunks_cover_large_cells() {
        let mut r = RngStream::new(2);
        let c = cloud((0..9000).map(|_| [r.uniform() as f32 * 0.9, 0.0, 0.0]).collect());
        let blocks = evaluation_blocks(&c, 1.0, &mut r).unwrap();
        assert_eq!(blocks.len(), 3);
        let mut seen = vec![false; 9000];
        for b in &blocks {
            assert_eq!(b.rows(), BLOCK_POINTS);
            b.indices.iter().for_each(|&i| seen[i] = true);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn assembly_averages_duplicates() {
        let b = Block {
            indices: vec![0, 0, 1],
            features: vec![0.0; 27],
            labels: None,
        };
        let s = SampleStack::new(1, 3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.3, 0.7]).unwrap();
        let out = assemble_predictions(2, core::slice::from_ref(&b), core::slice::from_ref(&s)).unwrap();
        assert_eq!(out.values(), &[0.5, 0.5, 0.3, 0.7]);
        assert!(matches!(assemble_predictions(3, &[b], &[s]), Err(Error::Uncovered(2))));
    }
}
