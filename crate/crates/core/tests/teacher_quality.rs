use headpool::data::{generate_dataset, DataSpec, DatasetKind};
use headpool::diffusion::{make_schedule, ScheduleKind};
use headpool::metrics::sliced_wasserstein;
use headpool::models::{build_generator, Arch, GeneratorSpec};
use headpool::teacher::{sample_teacher_set, teacher_gate, train_teacher, TeacherConfig};

#[test]
fn trained_teacher_is_far_closer_to_held_out_data_than_an_untrained_one() {
    let sched = make_schedule(ScheduleKind::Linear, 1000).unwrap().with_shift(250).unwrap();
    let data = DataSpec { name: DatasetKind::Gauss8, n_train: 4000, seed: 0 };
    let spec = GeneratorSpec::default_for(Arch::Mlp2d, &[2], 8);
    let cfg = TeacherConfig { iterations: 2000, gate_samples: 1000, ..TeacherConfig::default() };
    let run = train_teacher(&data, spec.clone(), &sched, &cfg).unwrap();
    assert!(teacher_gate(&run.net, &data, &sched, &run.losses, &cfg).unwrap().passed);

    let held_out = generate_dataset(&DataSpec { seed: 77, n_train: 2000, ..data }).unwrap().x;
    let mut untrained = build_generator(spec, 1).unwrap();
    untrained.mark_trained();
    let swd = |net| {
        let x = sample_teacher_set(net, DatasetKind::Gauss8, &sched, 50, 2000, 5).unwrap();
        sliced_wasserstein(&x, &held_out, 128, 0).unwrap()
    };
    let (trained, baseline) = (swd(&run.net), swd(&untrained));
    assert!(trained * 10.0 <= baseline, "trained {trained}, untrained {baseline}");
}
