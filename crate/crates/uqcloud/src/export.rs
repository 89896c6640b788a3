//! Result files: metrics and per-point CSVs, red/black uncertainty maps,
//! per-point quantile tables and raw sample-stack dumps.

use std::fmt::Write as _;
use std::path::Path;

use uqcloud_core::datapipe::PointCloud;
use uqcloud_core::inference::SampleStack;
use uqcloud_core::trainer::SceneEvaluation;
use uqcloud_core::uncertainty::{quantile_table, UncertaintyReport};

use crate::cloud_io::{ply_bytes, write_file, PlyFormat};
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "room,model,measure,accuracy,filtered_accuracy,drop_rate,miou";
pub const POINTS_HEADER: &str = "x,y,z,label,pred,measure,value,certain";

pub const CERTAIN_COLOR: [u8; 3] = [0, 0, 0];
pub const UNCERTAIN_COLOR: [u8; 3] = [255, 0, 0];

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// One row for the unfiltered scores (measure `none`) and one per measure.
pub fn metrics_rows(room: &str, model: &str, eval: &SceneEvaluation) -> Vec<String> {
    let miou = num(eval.miou);
    let mut rows = vec![format!("{room},{model},none,{:.6},NA,NA,{miou}", eval.accuracy)];
    for m in &eval.measures {
        rows.push(format!(
            "{room},{model},{},{:.6},{},{:.6},{miou}",
            m.report.measure,
            eval.accuracy,
            num(m.filtered.accuracy),
            m.filtered.drop_rate
        ));
    }
    rows
}

pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = &'a String>) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn points_csv(cloud: &PointCloud, prediction: &[usize], report: &UncertaintyReport) -> String {
    let mut out = format!("{POINTS_HEADER}\n");
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.xyz[i];
        let label = cloud
            .labels
            .as_ref()
            .map_or_else(|| "NA".to_string(), |l| l[i].to_string());
        let value = num(report.values.get(i).copied());
        let _ = writeln!(
            out,
            "{x},{y},{z},{label},{},{},{value},{}",
            prediction[i], report.measure, report.certain[i] as u8
        );
    }
    out
}

/// The cloud recolored black where certain and red where not.
pub fn uncertainty_map(cloud: &PointCloud, certain: &[bool]) -> PointCloud {
    PointCloud {
        rgb: certain
            .iter()
            .map(|&c| if c { CERTAIN_COLOR } else { UNCERTAIN_COLOR })
            .collect(),
        ..cloud.clone()
    }
}

pub fn write_uncertainty_map(path: &Path, cloud: &PointCloud, certain: &[bool]) -> Result<()> {
    write_file(
        path,
        &ply_bytes(&uncertainty_map(cloud, certain), PlyFormat::BinaryLittleEndian),
    )
}

/// Min, quartiles and max of each class's samples at `point`, as CSV.
pub fn quantile_csv(stack: &SampleStack, point: usize) -> Result<String> {
    let mut out = String::from("class,min,q25,median,q75,max\n");
    for (c, q) in quantile_table(stack, point)?.iter().enumerate() {
        let _ = writeln!(out, "{c},{:.6},{:.6},{:.6},{:.6},{:.6}", q[0], q[1], q[2], q[3], q[4]);
    }
    Ok(out)
}

/// `u32` K, P, m (little-endian), then the `f32` probabilities sample-major.
pub fn stack_bytes(stack: &SampleStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * stack.values().len());
    for d in [stack.samples(), stack.points(), stack.classes()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in stack.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_stack(bytes: &[u8], path: &Path) -> Result<SampleStack> {
    if bytes.len() < 12 {
        return Err(Error::format(path, "sample stack header is truncated"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (k, p, m) = (dim(0), dim(1), dim(2));
    let n = k.checked_mul(p).and_then(|v| v.checked_mul(m));
    if n.and_then(|n| n.checked_mul(4)).map(|b| b + 12) != Some(bytes.len()) {
        return Err(Error::format(
            path,
            format!("expected {k}x{p}x{m} f32 values after the header"),
        ));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(SampleStack::new(k, p, m, values)?)
}

pub fn write_stack(path: &Path, stack: &SampleStack) -> Result<()> {
    write_file(path, &stack_bytes(stack))
}

pub fn read_stack(path: &Path) -> Result<SampleStack> {
    parse_stack(&std::fs::read(path).map_err(Error::io(path))?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use uqcloud_core::metrics::Filtered;
    use uqcloud_core::trainer::MeasureResult;
    use uqcloud_core::uncertainty::Measure;

    fn stack() -> SampleStack {
        SampleStack::new(2, 2, 2, vec![0.25, 0.75, 1.0, 0.0, 0.5, 0.5, 0.875, 0.125]).unwrap()
    }

    #[test]
    fn stack_dump_round_trip() {
        let s = stack();
        let bytes = stack_bytes(&s);
        assert_eq!(&bytes[..12], &[2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(parse_stack(&bytes, Path::new("s")).unwrap().values(), s.values());
        assert!(parse_stack(&bytes[..bytes.len() - 4], Path::new("s")).is_err());
    }

    #[test]
    fn metrics_rows_mark_undefined_values() {
        let report = UncertaintyReport {
            measure: Measure::Credible,
            values: Vec::new(),
            certain: vec![false, false],
            threshold: None,
        };
        let eval = SceneEvaluation {
            prediction: vec![0, 1],
            accuracy: 0.5,
            miou: None,
            measures: vec![MeasureResult {
                report,
                filtered: Filtered {
                    accuracy: None,
                    drop_rate: 1.0,
                },
            }],
        };
        let rows = metrics_rows("r1", "bayesian", &eval);
        assert_eq!(rows[0], "r1,bayesian,none,0.500000,NA,NA,NA");
        assert_eq!(rows[1], "r1,bayesian,credible,0.500000,NA,1.000000,NA");
        assert!(metrics_csv(&rows).starts_with(METRICS_HEADER));
    }

    #[test]
    fn map_colors_and_point_rows() {
        let cloud = PointCloud {
            source: "s".into(),
            xyz: vec![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]],
            rgb: vec![[9; 3]; 2],
            labels: Some(vec![1, 0]),
        };
        let map = uncertainty_map(&cloud, &[true, false]);
        assert_eq!(map.rgb, vec![CERTAIN_COLOR, UNCERTAIN_COLOR]);
        let report = UncertaintyReport {
            measure: Measure::Predictive,
            values: vec![0.1, 0.7],
            certain: vec![true, false],
            threshold: Some(0.5),
        };
        let csv = points_csv(&cloud, &[1, 1], &report);
        assert_eq!(csv.lines().nth(2), Some("3,4,5,0,1,predictive,0.700000,0"));
    }

    #[test]
    fn quantiles_per_class() {
        let csv = quantile_csv(&stack(), 0).unwrap();
        assert_eq!(
            csv.lines().nth(1),
            Some("0,0.250000,0.312500,0.375000,0.437500,0.500000")
        );
        assert!(quantile_csv(&stack(), 2).is_err());
    }
}
