//! Fixtures shared by the criterion benchmarks.

use agenet::parity::{convert, trace, DeployRuntime, PortableRuntime};
use agenet::{AgeModel, Mode, ModelSpec, Pretrained, Tensor};

pub const FIXTURE_SEED: u64 = 17;

/// One randomly initialized model at `side` with its two exported runtimes.
pub struct Fixture {
    pub model: AgeModel,
    pub portable: PortableRuntime,
    pub deployment: DeployRuntime,
    pub input: Tensor,
}

pub fn fixture(side: usize) -> Fixture {
    let spec = ModelSpec {
        input_size: side,
        ..ModelSpec::default()
    };
    let mut model = AgeModel::build(spec, &Pretrained::Random { seed: FIXTURE_SEED }, FIXTURE_SEED)
        .expect("model builds");
    model.set_mode(Mode::Eval);
    let graph = trace(&model);
    let portable = PortableRuntime::new(&graph).expect("portable runtime");
    let deployment = DeployRuntime::new(convert(&graph).expect("deployment graph"));
    Fixture {
        model,
        portable,
        deployment,
        input: agenet::bench::bench_input(side, FIXTURE_SEED),
    }
}
