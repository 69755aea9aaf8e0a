"""One latent per block: sliding between full-sequence diffusion and
autoregression on the same model family.

Block VMD draws a fresh z for each block and generates blocks left to right,
conditioning on the finalized prefix.  With block length 4 on a 4-token
dataset that is plain VMD (one z, everything in parallel); with block length
1 it is a latent autoregressive model (four z's, four decodes).  In between
sits a 2x2 grid of compute/quality trade-offs: more blocks cost more decodes
per sequence but each latent has fewer modes to carry.

d1 couples all four tokens, so the interesting column is the cheapest one:
how much structure survives when each block gets a single decode.

Run: python3 demos/block_size_sweep.py   (~4 minutes)
"""

import numpy as np

from vmdlab.backbone import BackboneConfig, VMDModel
from vmdlab.datasets import dataset_spec, exact_distribution
from vmdlab.diffusion import TrainConfig, train
from vmdlab.rng import split_streams
from vmdlab.sampler import SampleConfig, sample_block_vmd

SEED = 0


def solve_rate(model, spec, nfe_per_block, n=5000):
    dist = exact_distribution(spec)
    cfg = SampleConfig(nfe=nfe_per_block, strategy="top_prob", num_samples=n)
    samples = sample_block_vmd(model, cfg, np.random.default_rng(7))
    return np.mean([bool(dist.validity(r)) for r in samples])


if __name__ == "__main__":
    print(f"{'block_len':>9} {'blocks':>6} {'z draws':>8} "
          f"{'acc @ 1 decode/block':>21} {'acc @ token-by-token':>21}")
    for block_len in (4, 2, 1):
        spec = dataset_spec("d1", block_len=block_len)
        cfg = BackboneConfig(vocab_size=10, seq_len=4, block_len=block_len,
                             hidden_dim=32, decoder_layers=4, encoder_layers=2,
                             num_heads=2, latent_dim=16)
        model = VMDModel(cfg, np.random.default_rng(SEED))
        tc = TrainConfig(batch_size=128, num_steps=1800, lr=3e-3,
                         kl_weight=1.0, kl_warmup_steps=1400, log_every=600)
        train(model, spec, tc, split_streams(SEED))
        one = solve_rate(model, spec, nfe_per_block=1)
        tbt = solve_rate(model, spec, nfe_per_block=block_len)
        print(f"{block_len:>9} {spec.num_blocks:>6} {spec.num_blocks:>8} "
              f"{one:>21.3f} {tbt:>21.3f}")
