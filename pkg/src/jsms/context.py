"""Seven-layer dilated context aggregation stack, identity-initialised."""

from __future__ import annotations

from .errors import ConfigurationError
from .netgraph import LayerSpec, NetworkSpec, NetworkState, conv
from .weights import identity_init_context

CONTEXT_DILATIONS = (1, 1, 2, 4, 8, 16, 1)


def context_layers(channels: int) -> list[LayerSpec]:
    """3x3 convs with padding equal to dilation; ReLU after all but the last."""
    if channels < 1:
        raise ConfigurationError(f"context channels must be >= 1, got {channels}")
    layers = []
    for i, d in enumerate(CONTEXT_DILATIONS, start=1):
        layers.append(conv(f"ctx{i}", channels, k=3, dilation=d, role="context"))
        if i < len(CONTEXT_DILATIONS):
            layers.append(LayerSpec(f"relu_ctx{i}", "relu", role_tag="context"))
    return layers


def context_spec(channels: int) -> NetworkSpec:
    return NetworkSpec(tuple(context_layers(channels)), in_channels=channels)


def build_context(channels: int) -> NetworkState:
    """A standalone context module that is an exact identity on non-negative inputs."""
    return identity_init_context(context_spec(channels))


def receptive_field() -> int:
    return 2 * sum(CONTEXT_DILATIONS) + 1


def insert_context(state: NetworkState, context: NetworkState | None = None) -> NetworkState:
    """Splice a context module between the amplify stage and the fully connected layers.

    Downstream weights are carried over untouched, so with an identity
    context the network's outputs are bitwise unchanged.
    """
    spec = state.spec
    if spec.has_context:
        raise ConfigurationError("network already contains a context module")
    if not spec.has_amplify:
        raise ConfigurationError("insert_context needs a network with an amplify stage (a stage-2 network)")
    if not any(l.role_tag == "fully_connected" for l in spec.convs):
        raise ConfigurationError("insert_context needs fully connected layers after the features")
    width = spec.feature_channels()
    if context is None:
        context = build_context(width)
    if context.spec.in_channels != width:
        raise ConfigurationError(
            f"context width {context.spec.in_channels} != feature channel count {width}"
        )
    at = spec.index("amplify") + 1
    layers = list(spec.layers[:at]) + list(context.spec.layers) + list(spec.layers[at:])
    params = dict(state.params)
    params.update(context.params)
    new_spec = spec.with_layers(layers)
    return NetworkState(new_spec, {k: params[k].copy() for k in new_spec.param_shapes()})
