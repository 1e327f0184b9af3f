"""What the channel does to a transmitted latent, and what a rate costs.

Three short experiments:

1. Send unit-power complex symbols through AWGN at a few SNRs and measure
   the SNR that comes out the other side.
2. Send them through block Rayleigh fading and compare the raw received
   symbols with the MMSE-equalized ones.
3. Print the channel bandwidth ratio of every (k_s, k_d) split the toy
   system can transmit for a 32x32 RGB image.

    python3 demos/channel_and_rates.py
"""
import math

import torch

from ditjscc import ChannelConfig, SystemConfig, cbr, transmit
from ditjscc.channel import equalize, normalize_power

g = torch.Generator().manual_seed(0)
s = normalize_power(torch.randn(4, 2 * 4096, generator=g, dtype=torch.float64))
print(f"mean symbol power after normalization: {s.abs().square().mean():.4f}")

print("\nAWGN")
for snr_db in (-5.0, 0.0, 10.0, 20.0):
    s_hat, _ = transmit(s, ChannelConfig("awgn", snr_db), g)
    measured = 10 * math.log10(1.0 / float((s_hat - s).abs().square().mean()))
    print(f"  target {snr_db:+6.1f} dB  measured {measured:+6.2f} dB")

print("\nRayleigh, 10 dB")
cfg = ChannelConfig("rayleigh", 10.0)
s_hat, h = transmit(s, cfg, g)
raw_mse = float((s_hat - s).abs().square().mean())
eq_mse = float((equalize(s_hat, h, cfg.noise_power) - s).abs().square().mean())
print(f"  E|h|^2 = {h.abs().square().mean():.3f}")
print(f"  symbol MSE raw {raw_mse:.3f}  after MMSE {eq_mse:.3f}")

print("\nrates for a 32x32x3 image (3072 real values)")
cands = SystemConfig().candidates
print("  total  k_s  k_d   cbr")
for total in (128, 256, 512):
    for k_s in cands.ks_set:
        if total - k_s in cands.kd_set:
            print(f"  {total:5d} {k_s:4d} {total - k_s:4d}  1/{1 / cbr(total, 32, 32):.0f}")
