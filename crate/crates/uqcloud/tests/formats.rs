//! File formats against hand-built bytes.

use std::path::Path;

use uqcloud::cloud_io::{parse_ascii, parse_ply, ply_bytes, PlyFormat};
use uqcloud::export::{metrics_csv, metrics_rows, parse_stack, quantile_csv, stack_bytes, METRICS_HEADER};
use uqcloud_core::inference::SampleStack;
use uqcloud_core::metrics::Filtered;
use uqcloud_core::trainer::{MeasureResult, SceneEvaluation};
use uqcloud_core::uncertainty::{Measure, UncertaintyReport};

type Fixture = (Vec<u8>, Vec<[f32; 3]>, Vec<[u8; 3]>, Vec<u32>);

/// Ten points whose properties use every width the reader accepts.
fn mixed_binary_fixture() -> Fixture {
    let header = "ply\nformat binary_little_endian 1.0\ncomment hand made\nelement vertex 10\n\
                  property double x\nproperty float y\nproperty short z\n\
                  property uchar red\nproperty ushort green\nproperty uint blue\n\
                  property char label\nend_header\n";
    let mut bytes = header.as_bytes().to_vec();
    let (mut xyz, mut rgb, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..10u8 {
        let (x, y, z) = (i as f64 * 0.25, -(i as f32) * 1.5, i as i16 - 4);
        bytes.extend_from_slice(&x.to_le_bytes());
        bytes.extend_from_slice(&y.to_le_bytes());
        bytes.extend_from_slice(&z.to_le_bytes());
        bytes.push(i * 20);
        bytes.extend_from_slice(&(i as u16 + 100).to_le_bytes());
        bytes.extend_from_slice(&(255 - i as u32).to_le_bytes());
        bytes.push(i % 3);
        xyz.push([x as f32, y, z as f32]);
        rgb.push([i * 20, i + 100, 255 - i]);
        labels.push((i % 3) as u32);
    }
    (bytes, xyz, rgb, labels)
}

#[test]
fn binary_ply_with_mixed_property_types() {
    let (bytes, xyz, rgb, labels) = mixed_binary_fixture();
    let cloud = parse_ply(&bytes, Path::new("fixture.ply")).unwrap();
    assert_eq!(cloud.xyz, xyz);
    assert_eq!(cloud.rgb, rgb);
    assert_eq!(cloud.labels, Some(labels));
}

#[test]
fn truncated_binary_body_is_an_error() {
    let (bytes, ..) = mixed_binary_fixture();
    assert!(parse_ply(&bytes[..bytes.len() - 3], Path::new("t.ply")).is_err());
}

#[test]
fn ascii_ply_without_labels() {
    let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
                property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n\
                1 2 3 4 5 6\n-1.5 0 0.25 255 0 9\n";
    let cloud = parse_ply(text.as_bytes(), Path::new("a.ply")).unwrap();
    assert_eq!(cloud.xyz, vec![[1.0, 2.0, 3.0], [-1.5, 0.0, 0.25]]);
    assert_eq!(cloud.rgb, vec![[4, 5, 6], [255, 0, 9]]);
    assert_eq!(cloud.labels, None);
}

#[test]
fn written_ply_reads_back_in_both_encodings() {
    let (bytes, ..) = mixed_binary_fixture();
    let cloud = parse_ply(&bytes, Path::new("f.ply")).unwrap();
    for format in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
        let back = parse_ply(&ply_bytes(&cloud, format), Path::new("b.ply")).unwrap();
        assert_eq!(
            (back.xyz, back.rgb, back.labels),
            (cloud.xyz.clone(), cloud.rgb.clone(), cloud.labels.clone())
        );
    }
}

#[test]
fn text_cloud_errors_name_the_line() {
    let err = parse_ascii("0 0 0 1 2 3 0\n0 0 x 1 2 3 0\n", Path::new("c.txt")).unwrap_err();
    assert!(err.to_string().starts_with("c.txt:2:"), "{err}");
}

#[test]
fn metrics_row_layout() {
    let eval = SceneEvaluation {
        prediction: vec![],
        accuracy: 0.8857,
        miou: Some(0.7042),
        measures: vec![
            MeasureResult {
                report: UncertaintyReport {
                    measure: Measure::Predictive,
                    values: vec![],
                    certain: vec![],
                    threshold: Some(0.5),
                },
                filtered: Filtered {
                    accuracy: Some(0.9312),
                    drop_rate: 0.0591,
                },
            },
            MeasureResult {
                report: UncertaintyReport {
                    measure: Measure::Credible,
                    values: vec![],
                    certain: vec![],
                    threshold: None,
                },
                filtered: Filtered {
                    accuracy: None,
                    drop_rate: 1.0,
                },
            },
        ],
    };
    let rows = metrics_rows("room_1", "bayesian", &eval);
    assert_eq!(
        metrics_csv(&rows),
        format!(
            "{METRICS_HEADER}\n\
             room_1,bayesian,none,0.885700,NA,NA,0.704200\n\
             room_1,bayesian,predictive,0.885700,0.931200,0.059100,0.704200\n\
             room_1,bayesian,credible,0.885700,NA,1.000000,0.704200\n"
        )
    );
}

#[test]
fn stack_dump_and_quantiles() {
    // K = 5 samples, one point, two classes; dyadic so f32 storage is exact.
    let values = vec![0.125, 0.875, 0.25, 0.75, 0.5, 0.5, 0.375, 0.625, 0.0625, 0.9375];
    let stack = SampleStack::new(5, 1, 2, values).unwrap();
    let bytes = stack_bytes(&stack);
    assert_eq!(&bytes[..12], &[5, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
    let back = parse_stack(&bytes, Path::new("s")).unwrap();
    assert_eq!(back.values(), stack.values());
    assert_eq!(
        quantile_csv(&back, 0).unwrap(),
        "class,min,q25,median,q75,max\n\
         0,0.062500,0.125000,0.250000,0.375000,0.500000\n\
         1,0.500000,0.625000,0.750000,0.875000,0.937500\n"
    );
    assert!(parse_stack(&bytes[..bytes.len() - 1], Path::new("s")).is_err());
}
