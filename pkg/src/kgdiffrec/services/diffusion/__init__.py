"""
Diffusion Service Module

Noise schedule, forward corruption, user-guided denoiser, reverse sampling
and top-q reconstruction of the knowledge graph.
"""
from .service import (
    DenoiserTrainer,
    DenoiserTrainingResult,
    GuidedDenoiser,
    NoiseSchedule,
    build_schedule,
    forward_diffuse,
    generate_denoised_kg,
    guidance_embedding,
    guidance_table,
    predict_x0,
    reverse_chain,
    reverse_step,
    select_top_q,
    train_denoiser,
)

__all__ = [
    'DenoiserTrainer',
    'DenoiserTrainingResult',
    'GuidedDenoiser',
    'NoiseSchedule',
    'build_schedule',
    'forward_diffuse',
    'generate_denoised_kg',
    'guidance_embedding',
    'guidance_table',
    'predict_x0',
    'reverse_chain',
    'reverse_step',
    'select_top_q',
    'train_denoiser',
]
