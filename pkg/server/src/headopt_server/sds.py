"""Score-distillation gradient computation for the /v1/sds_grad endpoint.

The gradient is (noise_prediction - injected_noise) / w, applied unscaled.
`w` maps the sampled timestep onto the diffusion noise schedule:

* ``sigma`` (default): w = sqrt((1 - alpha_bar(t)) / alpha_bar(t)), the
  noise-to-signal magnitude of a variance-preserving schedule at t;
* ``one``: w = 1, a plain unit step.

With classifier-free guidance, the prediction is
eps_u + cfg_scale * (eps_c - eps_u).  The denoiser is injectable so the
pipeline is testable without model weights: a pretrained latent-diffusion
backend plugs in behind the same callable signature.
"""
from __future__ import annotations

import numpy as np

# variance-preserving schedule, 1000 steps, linear beta ramp
_N_STEPS = 1000
_BETA_START = 8.5e-4
_BETA_END = 1.2e-2
_BETAS = np.linspace(_BETA_START, _BETA_END, _N_STEPS)
_ALPHA_BAR = np.cumprod(1.0 - _BETAS)


def alpha_bar(t: float) -> float:
    """Cumulative signal fraction at normalized timestep t in [0, 1]."""
    idx = int(round(float(t) * (_N_STEPS - 1)))
    idx = min(max(idx, 0), _N_STEPS - 1)
    return float(_ALPHA_BAR[idx])


def step_size(t: float, mode: str = "sigma") -> float:
    if mode == "one":
        return 1.0
    if mode == "sigma":
        ab = alpha_bar(t)
        return float(np.sqrt((1.0 - ab) / ab))
    raise ValueError(f"unknown w mode {mode!r}")


def sds_gradient(
    feature_image: np.ndarray,
    prompt: str,
    t: float,
    w: float,
    eps: np.ndarray,
    denoiser,
    cfg_scale: float,
) -> np.ndarray:
    """(prediction - eps) / w with classifier-free guidance.

    `denoiser(noisy, t, prompt, unconditional, w) -> noise prediction`.
    A perfect denoiser that returns the injected noise yields a zero
    gradient.
    """
    noisy = feature_image + np.float32(w) * eps
    eps_cond = np.asarray(denoiser(noisy, t, prompt, False, w), np.float32)
    eps_uncond = np.asarray(denoiser(noisy, t, prompt, True, w), np.float32)
    prediction = eps_uncond + np.float32(cfg_scale) * (eps_cond - eps_uncond)
    return (prediction - eps) / np.float32(w)


def load_pretrained_denoiser(model_path: str):
    """Wrap a pretrained latent-diffusion noise predictor as a denoiser
    callable.  Optional: requires torch + diffusers and downloaded weights."""
    try:
        import torch  # noqa: F401
        from diffusers import StableDiffusionPipeline  # type: ignore[import-not-found]
    except ImportError as exc:
        raise RuntimeError(
            "the real backend needs the optional ML dependencies "
            "(pip install 'headopt-server[real]') and local model weights") from exc

    pipe = StableDiffusionPipeline.from_pretrained(model_path)
    pipe.unet.eval()

    def denoiser(noisy, t, prompt, unconditional, w):
        import torch

        with torch.no_grad():
            latents = torch.from_numpy(np.asarray(noisy, np.float32))[None]
            timestep = torch.tensor([int(round(t * (_N_STEPS - 1)))])
            text = "" if unconditional else prompt
            embeds = pipe._encode_prompt(text, latents.device, 1, False, None)
            out = pipe.unet(latents, timestep, encoder_hidden_states=embeds).sample
            return out[0].numpy()

    return denoiser
