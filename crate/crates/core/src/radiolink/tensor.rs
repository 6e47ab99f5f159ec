//! Received-power tensor and SINR evaluation.

use serde::{Deserialize, Serialize};

/// Received power in mW from every transmitting AP to every device, on every
/// channel, at one timestep. Layout is `[rx device][tx AP][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGainTensor {
    pub num_subnetworks: usize,
    pub devices_per_subnetwork: usize,
    pub num_channels: usize,
    pub rx_power_mw: Vec<f64>,
}

impl ChannelGainTensor {
    pub fn zeros(num_subnetworks: usize, devices_per_subnetwork: usize, num_channels: usize) -> Self {
        let len = num_subnetworks * devices_per_subnetwork * num_subnetworks * num_channels;
        Self { num_subnetworks, devices_per_subnetwork, num_channels, rx_power_mw: vec![0.0; len] }
    }

    #[inline]
    pub fn device_index(&self, n: usize, m: usize) -> usize {
        n * self.devices_per_subnetwork + m
    }

    #[inline]
    fn offset(&self, rx: usize, tx: usize, k: usize) -> usize {
        (rx * self.num_subnetworks + tx) * self.num_channels + k
    }

    /// Power from AP `tx` at device `m` of subnetwork `n` on channel `k`.
    #[inline]
    pub fn get(&self, tx: usize, n: usize, m: usize, k: usize) -> f64 {
        self.rx_power_mw[self.offset(self.device_index(n, m), tx, k)]
    }

    #[inline]
    pub fn set(&mut self, tx: usize, n: usize, m: usize, k: usize, value: f64) {
        let o = self.offset(self.device_index(n, m), tx, k);
        self.rx_power_mw[o] = value;
    }

    /// The `[tx][channel]` block received by one device.
    pub fn device_block(&self, n: usize, m: usize) -> &[f64] {
        let width = self.num_subnetworks * self.num_channels;
        let rx = self.device_index(n, m);
        &self.rx_power_mw[rx * width..(rx + 1) * width]
    }

    pub fn device_block_mut(&mut self, rx: usize) -> &mut [f64] {
        let width = self.num_subnetworks * self.num_channels;
        &mut self.rx_power_mw[rx * width..(rx + 1) * width]
    }

    /// Co-channel interference at device `(n, m)` if it used channel `k`,
    /// given the channels of all other subnetworks.
    pub fn interference(&self, allocation: &[usize], n: usize, m: usize, k: usize) -> f64 {
        let block = self.device_block(n, m);
        allocation
            .iter()
            .enumerate()
            .filter(|&(i, &c)| i != n && c == k)
            .map(|(i, _)| block[i * self.num_channels + k])
            .sum()
    }

    pub fn is_valid(&self) -> bool {
        self.rx_power_mw.iter().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// SINR of device `m` of subnetwork `n` under `allocation`.
pub fn sinr(gains: &ChannelGainTensor, allocation: &[usize], n: usize, m: usize, noise_mw: f64) -> f64 {
    let k = allocation[n];
    gains.get(n, n, m, k) / (gains.interference(allocation, n, m, k) + noise_mw)
}

/// Noise-free ratio of device `(n, m)` measured on channel `k`; infinite when
/// nobody else transmits on `k`.
pub fn sir(gains: &ChannelGainTensor, allocation: &[usize], n: usize, m: usize, k: usize) -> f64 {
    gains.get(n, n, m, k) / gains.interference(allocation, n, m, k)
}
