use rawtask_core::data::{generate_scenes, Sample};
use rawtask_core::optics::lens::{Lens, LensParams};
use rawtask_core::optics::psf::PsfConfig;
use rawtask_core::params::Group;
use rawtask_core::pipeline::{train, NullObserver, Pipeline, PipelineConfig, Switches, TrainSchedule};
use rawtask_core::rng::RngKey;
use rawtask_core::segnet::SegNetConfig;

fn small(lens: bool) -> PipelineConfig {
    PipelineConfig {
        lens: if lens {
            Lens::Zernike(LensParams::defocus(0.5, 6))
        } else {
            Lens::Identity
        },
        psf: PsfConfig {
            pupil_samples: 32,
            kernel_size: 7,
        },
        network: SegNetConfig {
            base_width: 4,
            depth: 2,
            num_classes: 5,
            ..SegNetConfig::default()
        },
        ..PipelineConfig::default()
    }
}

fn scenes(n: usize) -> Vec<Sample> {
    generate_scenes(n, 3, 32, 32).unwrap()
}

fn schedule(epochs: usize) -> TrainSchedule {
    TrainSchedule {
        epochs,
        warmup_epochs: Some(1),
        batch_size: 2,
        lr: 5e-3,
        ..TrainSchedule::default()
    }
}

#[test]
fn training_is_reproducible() {
    let data = scenes(4);
    let run = || {
        let mut pipe = Pipeline::new(small(true)).unwrap();
        let mut params = pipe.init_params(RngKey::new(5)).unwrap();
        let out = train(&mut pipe, &mut params, &data, &[], &schedule(3), &mut NullObserver).unwrap();
        (out.log, params)
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(params_a, params_b);
}

#[test]
fn loss_falls_on_a_tiny_set() {
    let data = scenes(2);
    let mut pipe = Pipeline::new(small(false)).unwrap();
    let mut params = pipe.init_params(RngKey::new(0)).unwrap();
    let sched = TrainSchedule {
        batch_size: 1,
        lr: 2e-2,
        ..schedule(40)
    };
    let log = train(&mut pipe, &mut params, &data, &[], &sched, &mut NullObserver)
        .unwrap()
        .log;
    let (first, last) = (log[0].l_total, log[log.len() - 1].l_total);
    assert!(last < 0.8 * first, "{first} -> {last}");
}

#[test]
fn zero_throttle_keeps_lens_fixed() {
    let data = scenes(2);
    let mut pipe = Pipeline::new(small(true)).unwrap();
    let mut params = pipe.init_params(RngKey::new(0)).unwrap();
    let before = params.get("optics.zernike").unwrap().clone();
    let sched = TrainSchedule {
        throttle: 0.0,
        ..schedule(3)
    };
    train(&mut pipe, &mut params, &data, &[], &sched, &mut NullObserver).unwrap();
    assert_eq!(params.get("optics.zernike").unwrap(), &before);
    assert!(params.param("optics.zernike").unwrap().trainable);
}

#[test]
fn intermediates_follow_the_stage_chain() {
    let pipe = Pipeline::new(small(true)).unwrap();
    let params = pipe.init_params(RngKey::new(0)).unwrap();
    let x = scenes(1).remove(0).image;
    let fwd = pipe.forward(&x, &params, Some(RngKey::new(1)), true).unwrap();
    let names: Vec<&str> = fwd.intermediates.iter().map(|(n, _)| n.as_str()).collect();
    let chain: Vec<&str> = pipe.stages(true).iter().map(|s| s.name()).collect();
    assert_eq!(names, chain);
    assert_eq!(fwd.probs.shape(), &[32, 32, 5]);
    let without_noise: Vec<&str> = pipe.stages(false).iter().map(|s| s.name()).collect();
    assert_eq!(without_noise.len() + 1, chain.len());
}

#[test]
fn switches_decide_parameter_groups() {
    let mut cfg = small(true);
    cfg.switches = Switches {
        optics_on: false,
        cfa_learnable: false,
        exposure_learnable: false,
        ..Switches::default()
    };
    let pipe = Pipeline::new(cfg).unwrap();
    let params = pipe.init_params(RngKey::new(0)).unwrap();
    assert_eq!(params.count(Some(Group::Optics)), 0);
    assert!(params.iter().filter(|p| p.group == Group::Sensor).all(|p| !p.trainable));
    assert!(params.count(Some(Group::Network)) > 0);
}

#[test]
fn keyed_evaluation_is_deterministic() {
    let data = scenes(3);
    let pipe = Pipeline::new(small(true)).unwrap();
    let params = pipe.init_params(RngKey::new(2)).unwrap();
    let a = pipe.evaluate(&params, &data, Some(9)).unwrap();
    let b = pipe.evaluate(&params, &data, Some(9)).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.miou));
}

#[test]
fn lower_bit_depth_changes_predictions_only_through_quantization() {
    let data = scenes(2);
    let mut pipe = Pipeline::new(small(false)).unwrap();
    let params = pipe.init_params(RngKey::new(0)).unwrap();
    let x = &data[0].image;
    let hi = pipe.forward(x, &params, None, false).unwrap();
    pipe.set_bits(2).unwrap();
    let lo = pipe.forward(x, &params, None, false).unwrap();
    let n = hi.intermediates.len();
    for i in 0..n - 2 {
        assert_eq!(hi.intermediates[i], lo.intermediates[i]);
    }
    let levels: std::collections::BTreeSet<u64> = lo.intermediates[n - 2].1.data().iter().map(|v| v.to_bits()).collect();
    assert!(levels.len() <= 5, "{} levels", levels.len());
}
