use qcbadc::pipeline::{self, AdaptiveTaps, PipelineConfig, Topology};
use qcbadc::system::DesignSpec;

fn fixed_taps() -> PipelineConfig {
    PipelineConfig {
        adaptive_taps: AdaptiveTaps {
            enabled: false,
            ..AdaptiveTaps::default()
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn nominal_notch_is_found_at_fs_over_8() {
    let spec = DesignSpec::new(6, 8.0, 1.0, 0.125);
    let r = pipeline::run(&spec, &fixed_taps()).unwrap();
    let f = r.f_hat_n.unwrap();
    assert!((f / 0.125 - 1.0).abs() < 0.01, "{f}");
    assert!(r.snr.snr_db > 60.0, "{}", r.snr.snr_db);
    assert_eq!(r.taps, 512);
    assert_eq!(r.tap_history.len(), 1);
}

#[test]
fn lowpass_topology_measures_a_real_tone() {
    let spec = DesignSpec::new(4, 8.0, 1.0, 0.0);
    let cfg = PipelineConfig {
        topology: Topology::Lowpass,
        ..fixed_taps()
    };
    let r = pipeline::run(&spec, &cfg).unwrap();
    assert_eq!(r.operating.center, 0.0);
    assert!(r.snr.snr_db > 40.0, "{}", r.snr.snr_db);
    // A real input puts the tone on both sides.
    assert_eq!(r.snr.signal_bins.len(), 2 * (2 * cfg.analysis.guard + 1));
}

#[test]
fn tone_outside_the_band_is_rejected() {
    let spec = DesignSpec::new(6, 8.0, 1.0, 0.125);
    let mut cfg = fixed_taps();
    cfg.test.frequency = Some(0.3);
    assert!(matches!(
        pipeline::run(&spec, &cfg),
        Err(qcbadc::Error::InvalidConfig(_))
    ));
}
