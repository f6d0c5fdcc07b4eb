mod common;

use common::*;
use fbr_core::filterbank::{union_bank, Family, Filter, FilterBank};
use fbr_core::nn::{LayerSpec, Network, NetworkSpec};
use fbr_core::regularize::{fbr_assign, fbr_penalty, match_filter, BankCache, RegConfig};
use fbr_core::{rng, Error};
use rand::Rng;

#[test]
fn thousand_slices_agree_with_exhaustive_scan() {
    let bank = union_bank(7, 7).unwrap();
    assert_eq!(bank.len(), 118);
    let mut r = rng::stream(11, &[]);
    for i in 0..1000 {
        let scale = if i % 2 == 0 { 1.0 } else { r.random_range(0.2..3.0) };
        let slice: Vec<f64> = normal_vec(49, &mut r).iter().map(|v| v * 0.4).collect();
        let got = match_filter(&slice, 7, 7, &bank, scale).unwrap();
        assert_eq!(got, brute_force_match(&slice, &bank, scale), "slice {i}");
    }
}

#[test]
fn duplicate_members_resolve_to_the_first() {
    let base = union_bank(5, 5).unwrap();
    let mut filters = base.filters().to_vec();
    filters.push(base.filters()[3].clone());
    filters.insert(0, base.filters()[3].clone());
    let bank = FilterBank::new(filters).unwrap();
    let slice = base.filters()[3].coefficients().to_vec();
    assert_eq!(match_filter(&slice, 5, 5, &bank, 1.0).unwrap(), (0, 0.0));
}

#[test]
fn midpoint_of_two_members_picks_the_lower_index() {
    let deltas: Vec<Filter> = [7, 2]
        .iter()
        .map(|&at| {
            let mut c = vec![0.0; 9];
            c[at] = 1.0;
            Filter::new(3, 3, c, Family::External).unwrap()
        })
        .collect();
    let bank = FilterBank::new(deltas).unwrap();
    let mut slice = vec![0.0; 9];
    slice[7] = 0.5;
    slice[2] = 0.5;
    let (index, distance) = match_filter(&slice, 3, 3, &bank, 1.0).unwrap();
    assert_eq!(index, 0);
    assert!((distance - 0.5f64.sqrt()).abs() < 1e-15);
}

fn bank_copy_network(bank: &FilterBank, scale: f64) -> Network {
    let spec = NetworkSpec {
        input: [3, 9, 9],
        layers: vec![LayerSpec::conv(4, 5), LayerSpec::Relu, LayerSpec::conv(2, 5), LayerSpec::Flatten],
    };
    let mut net = Network::init(&spec, 3).unwrap();
    for layer in [0, 2] {
        let conv = net.conv_layer_mut(layer).unwrap();
        let area = 25;
        let slices = conv.kernels.len() / area;
        for s in 0..slices {
            let f = bank.filters()[(s * 37 + layer) % bank.len()].coefficients();
            for (dst, &v) in conv.kernels.data_mut()[s * area..(s + 1) * area].iter_mut().zip(f) {
                *dst = scale * v;
            }
        }
    }
    net
}

#[test]
fn bank_copies_have_zero_penalty_and_perturbations_cost_lambda_norm() {
    let bank = union_bank(5, 5).unwrap();
    let config = RegConfig {
        lambda_fbr: 0.75,
        bank_scale: 1.3,
        ..RegConfig::default()
    };
    let net = bank_copy_network(&bank, config.bank_scale);
    let cache = BankCache::for_network(bank.clone(), &net, &config).unwrap();
    let a = fbr_assign(&net, &cache, &config).unwrap();
    assert_eq!(a.len(), 4 * 3 + 2 * 4);
    assert_eq!(fbr_penalty(&net, &a, &cache, &config).unwrap(), 0.0);

    let mut r = rng::stream(5, &[]);
    for (layer, slice) in [(0, 0), (0, 7), (2, 5)] {
        let mut moved = net.clone();
        let delta: Vec<f64> = normal_vec(25, &mut r).iter().map(|v| v * 1e-3).collect();
        let conv = moved.conv_layer_mut(layer).unwrap();
        for (k, d) in conv.kernels.data_mut()[slice * 25..(slice + 1) * 25].iter_mut().zip(&delta) {
            *k += d;
        }
        let a = fbr_assign(&moved, &cache, &config).unwrap();
        let p = fbr_penalty(&moved, &a, &cache, &config).unwrap();
        let expected = config.lambda_fbr * delta.iter().map(|d| d * d).sum::<f64>();
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
    }
}

#[test]
fn stale_assignment_is_rejected() {
    let bank = union_bank(5, 5).unwrap();
    let config = RegConfig {
        lambda_fbr: 1.0,
        ..RegConfig::default()
    };
    let net = bank_copy_network(&bank, 1.0);
    let cache = BankCache::for_network(bank, &net, &config).unwrap();
    let a = fbr_assign(&net, &cache, &config).unwrap();
    let mut moved = net.clone();
    moved.conv_layer_mut(0).unwrap().kernels.data_mut()[0] += 0.1;
    assert!(matches!(
        fbr_penalty(&moved, &a, &cache, &config),
        Err(Error::StaleAssignment { layer: 0, kernel: 0, channel: 0, .. })
    ));
}

#[test]
fn small_kernels_are_not_selected() {
    let bank = union_bank(5, 5).unwrap();
    let net = Network::init(&small_spec(), 1).unwrap();
    let config = RegConfig::default();
    let cache = BankCache::for_network(bank, &net, &config).unwrap();
    let a = fbr_assign(&net, &cache, &config).unwrap();
    // only the 3-kernel, 1-channel 5x5 layer takes part
    assert_eq!(a.len(), 3);
    assert!(a.entries.iter().all(|e| e.layer == 0));
}
