"""Thin adversarial semi-supervised driver on synthetic data.

The segmenter is the tiny hybrid model; the discriminator sees an image
together with a class map (one-hot truth or softmax prediction) and emits
a per-pixel confidence. Unlabeled images contribute a cross-entropy term
only where the discriminator trusts the prediction.
"""
import argparse

import torch

from dfutissue.decoder import DecoderConfig, HybridSegmenter
from dfutissue.encoder import MitConfig
from dfutissue.gan import (Discriminator, GanLossWeights, adversarial_loss, discriminator_loss,
                           gan_semi_total, gan_supervised_total, masked_semi_ce)
from dfutissue.losses import cross_entropy, one_hot
from dfutissue.synthetic import synthetic_dataset, synthetic_unlabeled
from dfutissue.trainer import images_to_tensor, pairs_to_batch, seed_everything


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--labeled", type=int, default=8)
    p.add_argument("--unlabeled", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--semi-start", type=int, default=20, help="step at which unlabeled images join")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    seed_everything(args.seed)
    w = GanLossWeights()
    size = (args.size, args.size)
    x_l, y_l = pairs_to_batch(synthetic_dataset(args.labeled, args.seed, size))
    x_u = images_to_tensor([im.pixels for im in synthetic_unlabeled(args.unlabeled, args.seed + 1, size)])
    y_l = one_hot(y_l, 4)

    seg = HybridSegmenter(MitConfig.tiny(), DecoderConfig.tiny())
    disc = Discriminator(width=16)
    opt_s = torch.optim.Adam(seg.parameters(), lr=1e-3)
    opt_d = torch.optim.Adam(disc.parameters(), lr=1e-4, betas=(0.9, 0.99))

    for step in range(1, args.steps + 1):
        # segmenter update
        probs = seg(x_l).softmax(1)
        pixels = probs[0, 0].numel()  # the adversarial terms are pixel sums; bring them to CE scale
        loss = gan_supervised_total(cross_entropy(probs, y_l), adversarial_loss(disc(x_l, probs)) / pixels,
                                    w.lambda_adv_supervised)
        semi = torch.zeros(())
        if step >= args.semi_start:
            probs_u = seg(x_u).softmax(1)
            conf_u = disc(x_u, probs_u)
            pseudo = one_hot(probs_u.argmax(1), 4)
            masked = masked_semi_ce(probs_u, pseudo, conf_u.detach(), w.t_semi) / (len(x_u) * pixels)
            semi = gan_semi_total(masked, adversarial_loss(conf_u) / pixels, w.lambda_adv_semi)
        opt_s.zero_grad()
        (loss + semi).backward()
        opt_s.step()

        # discriminator update
        d_loss = discriminator_loss(disc(x_l, y_l), disc(x_l, probs.detach()))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()
        if step % 10 == 0 or step == 1:
            print(f"step {step:4d}  seg {loss.item():.4f}  semi {semi.item():.4f}  disc {d_loss.item():.4f}")


if __name__ == "__main__":
    main()
