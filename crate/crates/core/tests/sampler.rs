use nalgebra::DMatrix;

use ogd::denoiser::{DenoiserSpec, IdentityDecoder, MixtureComponent, ScalingDecoder};
use ogd::geomstate::PointState;
use ogd::guidance::{GuidanceConfig, RadiusOfGyration};
use ogd::sampler::{EvoConfig, Mode, RunConfig, Sampler};
use ogd::schedule::{NoiseSchedule, ScheduleKind};
use ogd::testbed::TestbedSpec;
use ogd::toyoracle::{CountingOracle, Scalarization};

fn mixture(n: usize, d: usize) -> DenoiserSpec {
    let bed = TestbedSpec { n_atoms: n, ..Default::default() }.build().unwrap();
    let component = |factor: f64, weight: f64, scale: f64| MixtureComponent {
        weight,
        mean: PointState::new(&bed.reference * factor, DMatrix::from_element(n, d, factor), true)
            .unwrap(),
        scale,
    };
    DenoiserSpec::Mixture(vec![component(1.3, 0.7, 0.2), component(0.8, 0.3, 0.1)])
}

fn config(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig::new(mode, 6, 5, 11);
    cfg.n_features = 2;
    cfg.guidance = GuidanceConfig {
        scale: 0.5,
        property_scale: 2.0,
        window: 80,
        skip: 2,
        target: 0.8,
        clean_steps: 3,
        ..Default::default()
    };
    cfg.evo = Some(EvoConfig { variant_size: 4, interval: 25, variant_scale: 0.1 });
    cfg
}

#[test]
fn every_mode_yields_finite_centered_samples() {
    let sched = NoiseSchedule::build(ScheduleKind::default(), 200).unwrap();
    let denoiser = mixture(5, 2);
    let bed = TestbedSpec { n_atoms: 5, ..Default::default() }.build().unwrap();
    let decoder = ScalingDecoder { factor: 1.1 };
    for mode in Mode::ALL {
        let cfg = config(mode);
        let sampler = Sampler::new(
            &sched,
            &denoiser,
            &decoder,
            Some(&bed.potential),
            Some(&RadiusOfGyration),
            &cfg,
        )
        .unwrap();
        let samples = sampler.run().unwrap();
        assert_eq!(samples.len(), 6);
        for s in &samples {
            assert!(s.is_finite(), "{mode}");
            assert!(s.max_column_mean() < 1e-8, "{mode}");
            assert_eq!(s.features().shape(), (5, 2));
        }
    }
}

#[test]
fn parallel_runs_keep_chain_order() {
    let sched = NoiseSchedule::build(ScheduleKind::default(), 120).unwrap();
    let denoiser = mixture(5, 2);
    let bed = TestbedSpec { n_atoms: 5, ..Default::default() }.build().unwrap();
    let cfg = config(Mode::BilevelNoisy);
    let sampler = Sampler::new(
        &sched,
        &denoiser,
        &IdentityDecoder,
        Some(&bed.potential),
        Some(&RadiusOfGyration),
        &cfg,
    )
    .unwrap();
    let all = sampler.run().unwrap();
    for (i, s) in all.iter().enumerate() {
        assert_eq!(*s, sampler.run_chain(Mode::BilevelNoisy, i).unwrap());
    }
    assert_ne!(all[0], all[1]);
}

#[test]
fn zero_scales_reduce_bilevel_clean_to_unguided() {
    let sched = NoiseSchedule::build(ScheduleKind::default(), 150).unwrap();
    let denoiser = mixture(5, 0);
    let bed = TestbedSpec { n_atoms: 5, ..Default::default() }.build().unwrap();
    let mut cfg = config(Mode::BilevelClean);
    cfg.n_features = 0;
    cfg.guidance.scale = 0.0;
    cfg.guidance.property_scale = 0.0;
    let sampler = Sampler::new(
        &sched,
        &denoiser,
        &IdentityDecoder,
        Some(&bed.potential),
        Some(&RadiusOfGyration),
        &cfg,
    )
    .unwrap();
    assert_eq!(sampler.sample_bilevel_clean().unwrap(), sampler.sample_unguided().unwrap());
}

#[test]
fn oracle_budget_counts_probes() {
    let sched = NoiseSchedule::build(ScheduleKind::default(), 100).unwrap();
    let bed = TestbedSpec { n_atoms: 4, ..Default::default() }.build().unwrap();
    let oracle = CountingOracle::new(bed.potential.clone());
    let mut cfg = RunConfig::new(Mode::Oracle, 3, 4, 5);
    cfg.guidance = GuidanceConfig {
        scale: 0.1,
        window: 30,
        skip: 4,
        probes: 3,
        scalarization: Scalarization::MeanNorm,
        ..Default::default()
    };
    let sampler =
        Sampler::new(&sched, &bed.denoiser, &IdentityDecoder, Some(&oracle), None, &cfg).unwrap();
    sampler.run().unwrap();
    // per guided step: F(x) once plus a +/- pair per probe
    assert_eq!(oracle.calls(), 3 * (30 / 4) * (1 + 2 * 3));
}

#[test]
fn guided_and_unguided_share_the_sampling_stream() {
    // guidance only at t <= 2 (the shift vanishes at t = 1, where sigma_1 = 0),
    // so the chains agree down to level 2 and split at level 1
    let sched = NoiseSchedule::build(ScheduleKind::default(), 60).unwrap();
    let bed = TestbedSpec { n_atoms: 4, ..Default::default() }.build().unwrap();
    let mut cfg = RunConfig::new(Mode::Oracle, 1, 4, 3);
    cfg.guidance = GuidanceConfig { scale: 1.0, window: 2, ..Default::default() };
    let sampler = Sampler::new(
        &sched,
        &bed.denoiser,
        &IdentityDecoder,
        Some(&bed.potential),
        None,
        &cfg,
    )
    .unwrap();
    let trace = |mode| {
        let (mut a, mut b) = ogd::sampler::chain_rngs(3, 0);
        let mut states = Vec::new();
        sampler
            .run_chain_with(
                mode,
                ogd::sampler::ChainNoise { sampling: &mut a, guidance: &mut b },
                &mut |t, z| states.push((t, z.clone())),
            )
            .unwrap();
        states
    };
    let (guided, plain) = (trace(Mode::Oracle), trace(Mode::Unguided));
    assert_eq!(guided.len(), 61);
    assert_eq!(guided[..59], plain[..59]);
    assert_ne!(guided[59], plain[59]);
}
