import numpy as np
import pytest

from storydiff import autodiff as ad
from storydiff.config import DataConfig, ModelConfig, SampleConfig, TrainConfig
from storydiff.data import generate_story
from storydiff.denoiser import init_params
from storydiff.schedule import make_cosine_schedule
from storydiff.seeding import derive_seed


# small-but-complete model used by most unit tests
TINY_MODEL = ModelConfig(
    channels=8, n_blocks=1, d_model=16, n_cond_heads=2, b_tok=4,
    vocab_size=64, patch=4, adapter_enabled=True, adapter_bottleneck=4,
)
TINY_SCHED_STEPS = 10


@pytest.fixture(scope="session")
def data_cfg():
    return DataConfig()


@pytest.fixture(scope="session")
def tiny_model():
    return TINY_MODEL


@pytest.fixture(scope="session")
def tiny_sched():
    return make_cosine_schedule(TINY_SCHED_STEPS)


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(TINY_MODEL, seed=derive_seed(0, "init"))


@pytest.fixture(scope="session")
def random_params():
    # every projection non-zero: gradients reach all layers
    return init_params(TINY_MODEL, seed=7, zero_init_outputs=False)


@pytest.fixture(scope="session")
def stories(data_cfg):
    return [generate_story(derive_seed(11, "story", i), data_cfg, story_id=i)
            for i in range(8)]


def weighted_sum(out, seed=0):
    """Scalar projection of an op output with fixed random weights, so
    gradient checks exercise non-uniform output adjoints."""
    r = np.random.default_rng(seed).standard_normal(out.data.shape)
    return ad.mean_all(ad.mul(out, ad.Tensor(r)))


def gradcheck(build, arrays, h=1e-5, tol=1e-4, check=None):
    """Compare backward() against central finite differences.

    build maps tensors (one per input array) to a scalar loss tensor.
    check selects which inputs to verify (default: all).
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    indices = range(len(arrays)) if check is None else check
    for i in indices:
        def f(x, i=i):
            probe = [ad.Tensor(a) for a in arrays]
            probe[i] = ad.Tensor(x)
            return build(*probe).item()
        numeric = ad.finite_diff_grad(f, arrays[i], h)
        err = ad.relative_error(tensors[i].grad, numeric)
        assert err <= tol, f"input {i}: rel err {err:.3e} > {tol}"
