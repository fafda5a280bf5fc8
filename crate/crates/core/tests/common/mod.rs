//! Desk-scale fixtures shared by the integration tests.
#![allow(dead_code)]

use monoview::datapipe::{synthetic_pair, StereoSample, TrainingData};
use monoview::netdef::LayerSpec;
use monoview::trainer::TrainConfig;

/// Two 64×64 synthetic pairs with a known constant disparity.
pub fn desk_samples() -> Vec<StereoSample> {
    vec![
        synthetic_pair(64, 64, 2.0, 1),
        synthetic_pair(64, 64, 2.0, 2),
    ]
}

pub fn desk_data() -> TrainingData {
    TrainingData::from_samples(desk_samples(), Vec::new())
}

/// Small, single-threaded configuration that finishes in seconds.
pub fn desk_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        patch: (64, 64),
        max_epochs: Some(max_epochs),
        deterministic: true,
        seed: 7,
        ..Default::default()
    }
}

pub fn encode(table: &[LayerSpec]) -> Vec<String> {
    table.iter().map(|s| s.encode()).collect()
}

pub fn golden_encoder() -> Vec<String> {
    let mut rows = vec![
        "1|conv|2|32|3x3|relu6|-",
        "2|depthwise_conv|1|-|3x3|relu6|-",
        "3|conv|1|64|1x1|relu6|-",
        "4|depthwise_conv|2|-|3x3|relu6|-",
        "5|conv|1|128|1x1|relu6|-",
        "6|depthwise_conv|1|-|3x3|relu6|-",
        "7|conv|1|128|1x1|relu6|-",
        "8|depthwise_conv|2|-|3x3|relu6|-",
        "9|conv|1|256|1x1|relu6|-",
        "10|depthwise_conv|1|-|3x3|relu6|-",
        "11|conv|1|256|1x1|relu6|-",
        "12|depthwise_conv|2|-|3x3|relu6|-",
        "13|conv|1|512|1x1|relu6|-",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for i in 0..5 {
        rows.push(format!("{}|depthwise_conv|1|-|3x3|relu6|-", 14 + 2 * i));
        rows.push(format!("{}|conv|1|512|1x1|relu6|-", 15 + 2 * i));
    }
    rows.extend(
        [
            "24|depthwise_conv|2|-|3x3|relu6|-",
            "25|conv|1|1024|1x1|relu6|-",
            "26|depthwise_conv|2|-|3x3|relu6|-",
            "27|conv|1|1024|1x1|relu6|-",
        ]
        .map(String::from),
    );
    rows
}

pub fn golden_decoder() -> Vec<String> {
    [
        "28|depthwise_conv|1|-|3x3|relu6|-",
        "29|conv|1|512|1x1|relu6|-",
        "30|upsample|2|-|-|none|-",
        "31|concat|1|-|-|none|24",
        "32|depthwise_conv|1|-|3x3|relu6|-",
        "33|conv|1|512|1x1|relu6|-",
        "34|upsample|2|-|-|none|-",
        "35|concat|1|-|-|none|12",
        "36|depthwise_conv|1|-|3x3|relu6|-",
        "37|conv|1|256|1x1|relu6|-",
        "38|upsample|2|-|-|none|-",
        "39|concat|1|-|-|none|8",
        "40|depthwise_conv|1|-|3x3|relu6|-",
        "41|conv|1|128|1x1|relu6|-",
        "42|upsample|2|-|-|none|-",
        "43|concat|1|-|-|none|4",
        "44|depthwise_conv|1|-|3x3|relu6|-",
        "45|conv|1|64|1x1|relu6|-",
        "46|upsample|2|-|-|none|-",
        // six stride-2 encoder stages need a sixth ×2 stage to return to full size
        "46+|upsample|2|-|-|none|-",
        "47|conv|1|1|2x2|relu|-",
    ]
    .map(String::from)
    .to_vec()
}

pub fn golden_refiner() -> Vec<String> {
    let mut rows: Vec<String> = (48..=54)
        .map(|i| format!("{i}|conv|1|64|3x3|relu|-"))
        .collect();
    rows.push("55|conv|1|3|3x3|none|-".into());
    rows
}

pub fn golden_cbm() -> Vec<String> {
    let mut rows: Vec<String> = (56..=59)
        .map(|i| format!("{i}|conv|1|32|3x3|relu|-"))
        .collect();
    // the last merger layer emits one blending weight per pixel
    rows.push("60|conv|1|1|3x3|sigmoid|-".into());
    rows
}
