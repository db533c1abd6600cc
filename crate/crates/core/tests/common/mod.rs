#![allow(dead_code)]

use mixtte_core::esgmoe::MoeConfig;
use mixtte_core::experiment::with_lookback;
use mixtte_core::model::{LinkContext, MixTte, ModelConfig};
use mixtte_core::network::{HotLinkSet, LinkAttrs, TrafficNetwork};
use mixtte_core::routemodel::{LinkHistory, RouteConfig};
use mixtte_core::stea::SteaConfig;
use mixtte_core::trafficgen::*;

pub struct Toy {
    pub net: TrafficNetwork,
    pub traffic: TrafficSliceTensor,
    pub trips: Vec<TripRecord>,
    pub ctx: LinkContext,
    pub history: LinkHistory,
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stea: SteaConfig {
            d: 8,
            heads: 2,
            u_ex: 4,
            u_in: 2,
            lookback: 3,
            ..SteaConfig::default()
        },
        moe: MoeConfig {
            n_graph: 2,
            n_null: 1,
            n_identity: 0,
            n_constant: 1,
            k: 2,
            m: 2,
            ..MoeConfig::default()
        },
        route: RouteConfig {
            d_r: 8,
            seq_layers: 1,
            seq_heads: 2,
            ..RouteConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> MixTte {
    MixTte::new(tiny_model_config(), seed).unwrap()
}

/// 3×3 grid (24 links), `days` days of default traffic, every link hot.
pub fn toy(days: usize, trips_per_day: usize, seed: u64) -> Toy {
    let net = generate_network(NetworkKind::Grid, 3, seed).unwrap();
    let traffic = simulate_traffic(&net, days, seed).unwrap();
    let cfg = TripConfig {
        min_route_links: 3,
        ..TripConfig::default()
    };
    let trips = generate_trips_with(&net, &traffic, trips_per_day, seed, &cfg).unwrap();
    let trips = with_lookback(&trips, tiny_model_config().stea.lookback);
    let ctx = LinkContext::new(&net, HotLinkSet::all(net.n_links()), 2).unwrap();
    let history = LinkHistory::new(&net, &traffic);
    Toy {
        net,
        traffic,
        trips,
        ctx,
        history,
    }
}

pub fn line_net(lengths: &[f64]) -> TrafficNetwork {
    let attrs = lengths
        .iter()
        .map(|&l| LinkAttrs {
            length_m: l,
            road_class: 1,
            free_flow_speed: 10.0,
        })
        .collect();
    TrafficNetwork::new(attrs, (1..lengths.len()).map(|i| (i - 1, i)).collect()).unwrap()
}

/// Six-link chain, four experts per layer, three trips sharing a start step.
pub struct E2e {
    pub model: MixTte,
    pub net: TrafficNetwork,
    pub traffic: TrafficSliceTensor,
    pub history: LinkHistory,
    pub ctx: LinkContext,
    pub trips: Vec<TripRecord>,
}

pub fn e2e_toy() -> E2e {
    let net = line_net(&[120.0, 80.0, 200.0, 150.0, 90.0, 300.0]);
    let traffic = simulate_traffic(&net, 1, 5).unwrap();
    let history = LinkHistory::new(&net, &traffic);
    let ctx = LinkContext::new(&net, HotLinkSet::all(6), 2).unwrap();
    let trips = [vec![0, 1, 2], vec![2, 3, 4, 5], vec![1, 2, 3]]
        .into_iter()
        .map(|route| {
            let y = traverse(&net, &traffic, &route, 100).unwrap().seconds;
            TripRecord {
                origin: route[0],
                destination: *route.last().unwrap(),
                start_step: 100,
                route,
                true_duration: round_centis(y),
            }
        })
        .collect();
    let model = tiny_model(17);
    assert_eq!(model.layers[0].pool.n_experts(), 4);
    E2e {
        model,
        net,
        traffic,
        history,
        ctx,
        trips,
    }
}

/// Max relative error of the gradient of the full training objective
/// (regression plus weighted load losses) over every parameter. The hashed
/// wide table is replaced by a single bucket to keep the check small.
pub fn e2e_grad_error(e: &E2e, alpha: f64) -> f64 {
    use mixtte_core::diffmath::{grad_check_many, Array};
    use mixtte_core::params::Bound;
    use mixtte_core::routemodel::{build_batch, predict_batch};
    use mixtte_core::trainer::{regression_loss, total_loss};

    let refs: Vec<&TripRecord> = e.trips.iter().collect();
    let mut batch = build_batch(&e.net, &e.traffic, &e.history, &e.ctx.hot, &refs).unwrap();
    batch.wide = vec![0; batch.wide.len()];
    let truth: Vec<f64> = e.trips.iter().map(|t| t.true_duration).collect();
    let x = e.model.link_input(&e.traffic, &e.ctx, 100).unwrap();
    let wide = e.model.route.wide_table.index();
    let mut params = e.model.store.arrays();
    params[wide] = Array::scalar(0.05);
    grad_check_many(
        |t, vars| {
            let b = Bound::from_vars(vars.to_vec());
            let xv = t.constant(x.clone());
            let lf = e.model.link_forward(t, &b, xv, &e.ctx.adjm)?;
            let pred = predict_batch(t, &batch, Some(lf.emb), &e.model.route, &b, 0.0)?;
            let reg = regression_loss(t, pred, &truth)?;
            total_loss(t, reg, &lf.load_losses, alpha)
        },
        &params,
        1e-5,
    )
    .unwrap()
}
