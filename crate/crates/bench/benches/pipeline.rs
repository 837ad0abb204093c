use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dtlight_core::behavior::{collect_datasets, BehaviorKind, BehaviorSpec};
use dtlight_core::data::{sample_batch, Dataset};
use dtlight_core::dtlight::{loss_and_grads, sized_for};
use dtlight_core::mdp::ObservationLayout;
use dtlight_core::nn::{Batch, Gradients, ModelConfig, PolicyModel};
use dtlight_core::sim::{build_scenario, ScenarioParams, Simulator, GRID_2X2, SINGLE_3LANE};

fn dataset() -> Dataset {
    let net = build_scenario(&ScenarioParams::named(SINGLE_3LANE)).unwrap();
    let layout = ObservationLayout::for_network(&net, 0.75).unwrap();
    let spec = BehaviorSpec::of_kind(BehaviorKind::Emp);
    collect_datasets(&spec, &net, &layout, 2, 0).unwrap().remove(0)
}

fn sim_episode(c: &mut Criterion) {
    let net = build_scenario(&ScenarioParams::named(GRID_2X2)).unwrap();
    let phases: Vec<usize> = net.intersections.iter().map(|i| i.num_phases()).collect();
    c.bench_function("sim/grid-2x2 episode", |b| {
        b.iter(|| {
            let mut sim = Simulator::new(&net, 7).unwrap();
            let mut t = 0usize;
            while !sim.is_done() {
                let p: Vec<usize> = phases.iter().map(|&n| (t / 3) % n).collect();
                sim.step(&p).unwrap();
                t += 1;
            }
            sim.metrics()
        })
    });
}

fn model(c: &mut Criterion, name: &str, base: ModelConfig, data: &Dataset) {
    let model = PolicyModel::<f32>::init(sized_for(base, data), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = Batch::from_windows(&sample_batch(data, 32, 20, &mut rng).unwrap()).unwrap();
    c.bench_function(&format!("{name}/forward B32 K20"), |b| b.iter(|| model.logits(&batch).unwrap()));
    let mut grads = Gradients::for_store(&model.store);
    c.bench_function(&format!("{name}/loss+backward B32 K20"), |b| {
        b.iter_batched(
            || (),
            |_| {
                grads.zero();
                loss_and_grads(&model, &batch, 0.0, None, None, &mut grads).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn networks(c: &mut Criterion) {
    let data = dataset();
    model(c, "student 2x2x32", ModelConfig::new(2, 2, 32, 0, 0), &data);
    model(c, "teacher 3x4x64", ModelConfig::new(3, 4, 64, 0, 0), &data);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = sim_episode, networks
}
criterion_main!(benches);
