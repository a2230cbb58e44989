//! Fixtures shared by the benchmarks.

use distvad::arraysim::{render_scene, NoiseKind, NoiseSpec, SceneSpec, SourceSpec};
use distvad::beamform::ArrayGeometry;
use distvad::pipeline::{FrontendConfig, FrontendKind, Model, ModelConfig};
use distvad::seqmodel::TcnConfig;
use distvad::signal::MultichannelSignal;

/// Two-talker scene on an 8-microphone UCA with diffuse noise.
pub fn scene(duration_s: f64) -> MultichannelSignal {
    let spec = SceneSpec {
        geometry: ArrayGeometry::uca(8, 0.1).expect("valid array"),
        sources: [(0.6, 0.0), (3.4, 0.5)]
            .iter()
            .map(|&(az, onset)| SourceSpec {
                azimuth_rad: az,
                onset_s: onset,
                duration_s: duration_s - onset,
                signal: Default::default(),
                level_db: 0.0,
                speaker: None,
            })
            .collect(),
        noise: NoiseSpec {
            kind: NoiseKind::DiffuseApprox,
            snr_db: 10.0,
            channel_offsets_db: vec![],
        },
        duration_s,
        sample_rate: 16000,
        seed: 7,
        file_id: "bench".into(),
    };
    render_scene(&spec).expect("scene renders").mixture
}

/// Model with the given front end at paper-scale widths.
pub fn model(kind: FrontendKind) -> Model {
    let mut f = FrontendConfig::new(kind);
    if kind == FrontendKind::Mvdr {
        f.geometry = Some(ArrayGeometry::uca(8, 0.1).expect("valid array"));
    }
    Model::init(ModelConfig::new(f, TcnConfig::default()), 0).expect("valid model")
}
