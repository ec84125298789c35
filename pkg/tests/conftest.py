"""Shared fixtures: layouts, color models, and cached rendered cards."""

import numpy as np
import pytest

from padvision import core, synth


@pytest.fixture(scope="session")
def layout12():
    return core.canonical_layout(12)


@pytest.fixture(scope="session")
def layout9():
    return core.canonical_layout(9)


@pytest.fixture(scope="session")
def panel_model():
    return synth.panel_color_model(0)


@pytest.fixture(scope="session")
def clean_card(layout12, panel_model):
    """Undistorted card photo + ground truth for drug 0."""
    return synth.render_card(0, layout12, panel_model,
                             synth.IDENTITY_DISTORTION, seed=42)


@pytest.fixture(scope="session")
def clean_crop(clean_card, layout12):
    photo, truth = clean_card
    return synth.crop_with_truth(photo, truth, layout12)


@pytest.fixture(scope="session")
def distorted_card(layout12, panel_model):
    """Card photo rendered with the default distortion."""
    return synth.render_card(2, layout12, panel_model,
                             synth.DistortionParams(), seed=7)


@pytest.fixture
def rng():
    """Fresh deterministic generator per test, so tests are order-independent."""
    return np.random.default_rng(1234)
