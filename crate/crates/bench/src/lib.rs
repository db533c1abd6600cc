//! Fixtures shared by the benchmarks.

use mixtte_core::diffmath::Array;
use mixtte_core::model::{LinkContext, MixTte, ModelConfig};
use mixtte_core::network::HotLinkSet;
use mixtte_core::params::{Init, ParamStore};
use mixtte_core::stea::{SteaConfig, SteaParams};
use mixtte_core::trafficgen::{generate_network, simulate_traffic, NetworkKind, TrafficSliceTensor};

pub struct EkrFixture {
    pub store: ParamStore,
    pub params: SteaParams,
    pub h: Array,
}

/// External-memory retrieval inputs for `n` links.
pub fn ekr_fixture(n: usize, d: usize, u_ex: usize, seed: u64) -> EkrFixture {
    let cfg = SteaConfig {
        d,
        u_ex,
        ..SteaConfig::default()
    };
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let params = SteaParams::init(&mut store, &mut init, &cfg).expect("valid encoder config");
    let h = init.uniform(n, d, 1.0);
    EkrFixture { store, params, h }
}

pub struct RefreshFixture {
    pub model: MixTte,
    pub traffic: TrafficSliceTensor,
    pub ctx: LinkContext,
}

/// Default model over the first `n` links of a grid large enough to hold
/// them, with one day of traffic.
pub fn refresh_fixture(n: usize, seed: u64) -> RefreshFixture {
    let mut width = 2;
    while 4 * width * (width - 1) < n {
        width += 1;
    }
    let net = generate_network(NetworkKind::Grid, width, seed).expect("grid");
    let traffic = simulate_traffic(&net, 1, seed).expect("traffic");
    let cfg = ModelConfig::default();
    let hot = HotLinkSet::new((0..n).collect(), vec![1.0; net.n_links()]);
    let ctx = LinkContext::new(&net, hot, cfg.moe.m).expect("context");
    let model = MixTte::new(cfg, seed).expect("model");
    RefreshFixture { model, traffic, ctx }
}
