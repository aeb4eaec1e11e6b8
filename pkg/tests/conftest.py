"""Shared builders for the test suite.

Small factory helpers only; expensive solves live in the module that needs
them so unit files stay fast when run alone.
"""

import numpy as np

from lscontrol import (
    ControlSet,
    GridSpec,
    LossSpec,
    ProblemSpec,
    SdeCoefficients,
    TimeGrid,
)


def relu(z):
    """First-coordinate hinge, usable on single points and batches alike."""
    return np.maximum(np.asarray(z, dtype=float)[..., 0], 0.0)


def make_gbm_spec(mu=0.1, sigma=0.2, dates=(0.0, 1.0), z_box=(0.2, 3.0)):
    """Uncontrolled geometric Brownian motion with identity-style costs."""
    sde = SdeCoefficients(
        drift=lambda t, z, u: mu * np.asarray(z, dtype=float),
        diffusion=lambda t, z, u: sigma * np.asarray(z, dtype=float)[..., None],
        state_dim=1,
        lipschitz_z=max(abs(mu), abs(sigma)),
        growth_z=max(abs(mu), abs(sigma)),
    )
    loss = LossSpec(terminal_cost=relu, loss=relu, lipschitz_f=1.0, lipschitz_psi=1.0)
    return ProblemSpec(
        sde=sde,
        loss=loss,
        grid=TimeGrid(dates),
        controls=ControlSet.finite([(0.0,)]),
        sample_box=(tuple(z_box),),
    )


def coarse_grid(spec, nz=21, np_=9, nm=9, dt=0.05, z_box=(0.2, 3.0),
                p_max=2.0, m_max=2.0, **kw):
    n_dates = len(spec.grid.dates) - 1
    return GridSpec(
        z_axis=((z_box[0], z_box[1], nz),),
        p_axis=tuple((p_max, np_) for _ in range(n_dates)),
        m_axis=(m_max, nm),
        dt=dt,
        **kw,
    )
