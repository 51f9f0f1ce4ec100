import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def gen_config():
    from handfield import scenes

    return scenes.GenerationConfig()


@pytest.fixture(scope="session")
def sample_scene_7(gen_config):
    from handfield import scenes

    return scenes.sample_scene(7, gen_config)


def finite_difference_check(module, forward, *, step=1e-6, rel_tol=1e-4, max_coords=6, seed=0):
    """Central-difference gradient check of scalar `forward()` wrt module params.

    Subsamples up to `max_coords` coordinates per parameter; comparisons in
    float64 with relative error scaled by max(1, |fd|).
    """
    module = module.double()
    loss = forward()
    module.zero_grad()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in module.named_parameters():
        if p.grad is None:
            continue
        flat = p.detach().reshape(-1)
        grad = p.grad.reshape(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(max_coords, n), replace=False)
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
            up = forward().item()
            with torch.no_grad():
                flat[i] = orig - step
            down = forward().item()
            with torch.no_grad():
                flat[i] = orig
            fd = (up - down) / (2 * step)
            err = abs(grad[i].item() - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
            assert err <= rel_tol, f"{name}[{i}]: autograd {grad[i].item()} vs fd {fd} (rel {err:.2e})"
    return worst
