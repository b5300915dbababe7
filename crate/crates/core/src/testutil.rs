use crate::model::ModelConfig;
use crate::synthgen::DatasetConfig;

pub fn tiny_data(num_clips: usize) -> DatasetConfig {
    DatasetConfig {
        num_clips,
        num_classes: 4,
        frames: 6,
        height: 2,
        width: 2,
        audio_rate: 4,
        ..DatasetConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden: vec![3, 2],
        embed_dim: 2,
        decoder_hidden: 3,
        future_frames: 4,
        align_window: 3,
        align_offset: 2,
        contrastive_margin: 1.0,
    }
}
