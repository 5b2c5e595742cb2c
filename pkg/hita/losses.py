"""Tokenizer objective

    total = alpha * (vq_holistic + vq_patch)
          + lambda_ae * (l2 + perceptual + lambda_g * adversarial)
"""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autoencoder import normalize
from .errors import ShapeError
from .models import LossReport


def reconstruction_loss(x, x_hat):
    '''Mean squared pixel error between two ImageBatches.'''
    if x.pixels.shape != x_hat.pixels.shape:
        raise ShapeError('reconstruction shape {} does not match input {}'.format(
            tuple(x_hat.pixels.shape), tuple(x.pixels.shape)))
    return F.mse_loss(x_hat.pixels, x.pixels.to(x_hat.pixels.dtype))


def perceptual_loss(x, x_hat, provider):
    '''Sum over provider layers of the mean squared feature difference.

    A provider without feature maps (`off`) contributes zero.
    '''
    maps = provider.feature_maps(x.pixels)
    maps_hat = provider.feature_maps(x_hat.pixels)
    if not maps:
        return x_hat.pixels.new_zeros(())
    return sum(F.mse_loss(a, b) for a, b in zip(maps_hat, maps))


class PatchDiscriminator(nn.Module):
    '''Three strided convolutions giving one logit per image patch.'''

    def __init__(self, channels=32):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(3, channels, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 2 * channels, kernel_size=4, stride=2, padding=1),
            normalize(2 * channels),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * channels, 1, kernel_size=3, stride=1, padding=1))

    def forward(self, pixels):
        return self.layers(pixels.permute(0, 3, 1, 2))


def hinge_d_loss(logits_real, logits_fake):
    return 0.5 * (F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean())


def hinge_g_loss(logits_fake):
    return -logits_fake.mean()


def adversarial_terms(x, x_hat, discriminator=None):
    '''
    Returns
    -------
    generator_loss, discriminator_loss : torch.Tensor
        Both zero when the discriminator is disabled. The discriminator
        loss sees detached inputs.
    '''
    if discriminator is None:
        zero = x_hat.pixels.new_zeros(())
        return zero, zero
    g_loss = hinge_g_loss(discriminator(x_hat.pixels))
    d_loss = hinge_d_loss(discriminator(x.pixels.detach()),
                          discriminator(x_hat.pixels.detach()))
    return g_loss, d_loss


def combine(config, l2, perceptual, adversarial, vq_holistic, vq_patch):
    return (config.alpha * (vq_holistic + vq_patch)
            + config.lambda_ae * (l2 + perceptual + config.lambda_g * adversarial))


def make_report(step, config, l2, perceptual, adversarial, vq_holistic, vq_patch):
    '''LossReport from scalar terms; `total` recomputed from the floats.'''
    terms = [t.detach().item() if torch.is_tensor(t) else float(t)
             for t in (l2, perceptual, adversarial, vq_holistic, vq_patch)]
    return LossReport(step, *terms, total=combine(config, *terms))
