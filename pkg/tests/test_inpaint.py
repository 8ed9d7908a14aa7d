import math

import numpy as np
import torch
from torch import nn

from scenecomp import core
from scenecomp.inpaint import (
    InpaintModel,
    convert_unpaired_to_paired,
    inpaint_loss,
    make_occluded,
    random_occluders,
)
from scenecomp.data import ToyLayoutRule, generate_toy_dataset


class _ConstGen(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return self.value


class _ConstLogit(nn.Module):
    def __init__(self, logit=0.0):
        super().__init__()
        self.logit = logit

    def forward(self, x):
        return torch.full((x.shape[0], 1, 4, 4), self.logit)


def rand_img(b=1, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(-1, 1, size=(b, 3, size, size))).float()


def box_mask(b, size, r0, c0, side):
    m = torch.zeros(b, size, size)
    m[:, r0 : r0 + side, c0 : c0 + side] = 1.0
    return m


# --- make_occluded ---------------------------------------------------------

def test_empty_occluder_is_noop():
    img = rand_img(seed=1)
    masked, occ = make_occluded(img, torch.zeros(1, 32, 32))
    assert torch.equal(masked, img)


def test_full_occluder_gives_background():
    img = rand_img(seed=2)
    masked, _ = make_occluded(img, torch.ones(1, 32, 32))
    assert torch.equal(masked, torch.full_like(img, -1.0))


def test_partial_occluder_preserves_visible_pixels():
    img = rand_img(seed=3)
    occ = (torch.rand(1, 32, 32) > 0.5).float()
    masked, _ = make_occluded(img, occ)
    keep = occ.unsqueeze(1) == 0
    assert torch.equal(masked[keep.expand_as(img)], img[keep.expand_as(img)])
    assert (masked[(~keep).expand_as(img)] == -1.0).all()


def test_random_occluders_are_translated_pool_masks():
    gen = torch.Generator().manual_seed(0)
    pool = box_mask(4, 32, 4, 4, 10)
    occ = random_occluders(pool, batch=8, generator=gen)
    assert occ.shape == (8, 32, 32)
    # areas can only shrink when a shift pushes the box off-frame
    assert (occ.sum(dim=(1, 2)) <= 100).all()


# --- pass-through invariant ------------------------------------------------

def test_generator_pass_through_is_exact():
    torch.manual_seed(4)
    model = InpaintModel(base=4)
    model.eval()
    img = rand_img(seed=5)
    occ = box_mask(1, 32, 8, 8, 12)
    masked, _ = make_occluded(img, occ)
    out = model(masked, occ)
    off = (occ.unsqueeze(1) == 0).expand_as(img)
    assert (out[off] - img[off]).abs().max() <= 1e-6


# --- inpaint_loss ----------------------------------------------------------

def test_loss_zero_when_generator_is_perfect():
    img = rand_img(seed=6)
    occ = torch.ones(1, 32, 32)
    model = InpaintModel(base=4)
    model.generator = _ConstGen(img)
    g, _ = inpaint_loss(model, make_occluded(img, occ)[0], occ, img, gan_weight=0.0, gp_weight=0.0)
    assert g.item() == 0.0


def test_loss_constant_offset_closed_form():
    img = rand_img(seed=7)
    occ = torch.ones(1, 32, 32)
    model = InpaintModel(base=4)
    model.generator = _ConstGen(img + 0.2)
    g, _ = inpaint_loss(model, make_occluded(img, occ)[0], occ, img, gan_weight=0.0, gp_weight=0.0)
    assert abs(g.item() - 0.2) <= 1e-6


def test_loss_with_frozen_half_probability_discriminator():
    img = rand_img(seed=8)
    occ = box_mask(1, 32, 10, 10, 8)
    model = InpaintModel(base=4)
    model.discriminator = _ConstLogit(0.0)
    masked, _ = make_occluded(img, occ)
    model.eval()
    filled = model(masked, occ)
    l1 = (filled - img).abs().mean().item()
    g, d = inpaint_loss(model, masked, occ, img, gan_weight=1.0, gp_weight=0.0)
    assert abs(g.item() - (l1 + math.log(2))) <= 1e-5
    assert abs(d.item() - math.log(2)) <= 1e-5


# --- convert_unpaired_to_paired --------------------------------------------

def disjoint_bundle():
    rule = ToyLayoutRule(offset_frac=(0.32, 0.0), scale_ratio=0.5, fill_a=0.35)
    return generate_toy_dataset(rule, 3, seed=9, mode="paired")


def test_disjoint_objects_pass_through_cutouts():
    bundle = disjoint_bundle()
    # verify the objects really are disjoint in these scenes
    overlap = (bundle.x_c_mask * bundle.y_c_mask).sum()
    assert overlap == 0
    model_x = InpaintModel(base=4)
    model_y = InpaintModel(base=4)
    x_c, y_c = convert_unpaired_to_paired(bundle.c, bundle.c_labels, model_x, model_y)
    for i in range(len(bundle)):
        own = bundle.c_labels[i] == 1
        assert (x_c[i][:, own] - bundle.c[i][:, own]).abs().max() <= 1e-6
        own_y = bundle.c_labels[i] == 2
        assert (y_c[i][:, own_y] - bundle.c[i][:, own_y]).abs().max() <= 1e-6


def test_assembling_converted_outputs_reproduces_composite():
    bundle = disjoint_bundle()
    model_x = InpaintModel(base=4)
    model_y = InpaintModel(base=4)
    x_c, y_c = convert_unpaired_to_paired(bundle.c, bundle.c_labels, model_x, model_y)
    for i in range(len(bundle)):
        m_x, m_y = core.labels_to_masks(bundle.c_labels[i])
        rebuilt = core.assemble_composite(x_c[i], y_c[i], m_x, m_y)
        labeled = (bundle.c_labels[i] != 0).unsqueeze(0).expand(3, -1, -1)
        assert (rebuilt[labeled] - bundle.c[i][labeled]).abs().max() <= 1e-6


def test_single_example_api():
    bundle = disjoint_bundle()
    x_c, y_c = convert_unpaired_to_paired(
        bundle.c[0], bundle.c_labels[0], InpaintModel(base=4), InpaintModel(base=4)
    )
    assert x_c.shape == (3, 64, 64) and y_c.shape == (3, 64, 64)
