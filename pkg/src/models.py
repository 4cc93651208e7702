"""
Toy unified models: per-modality encoders, the connector (projectors,
fusion layer, soft-prompt generator) and a frozen dense backbone carrying
LoRA adapters, with hand-written backprop for every trainable part.

Everything works on minibatches: a batch of n samples is a dict of
modality -> (n, raw_dim) arrays, soft prompts are (n, k_p, d_b) and logits
(n, k_p, V).
"""

import copy
import logging
from collections import OrderedDict

import numpy as np
import scipy.special

from . import numeric
from .attribute_container import AttributeContainer
from .utils import digest

LOGGER = logging.getLogger(__name__)

IDENTITY = 'identity'
GELU = 'gelu'
ACTIVATIONS = (IDENTITY, GELU)

ENCODERS = 'encoders'
PROJECTORS = 'projectors'
FUSION = 'fusion'
SOFT_PROMPT = 'soft_prompt'
ADAPTERS = 'adapters'
BACKBONE = 'backbone'
TRAINABLE_GROUPS = (ENCODERS, PROJECTORS, FUSION, SOFT_PROMPT, ADAPTERS)
CONNECTOR_GROUPS = (PROJECTORS, FUSION, SOFT_PROMPT)

DEGENERATE_NORM = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class UnknownModalityError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


class FrozenParameterError(RuntimeError):
    pass


def gelu(x):
    """
    Exact GeLU, x * Phi(x).
    """
    return 0.5 * x * (1.0 + scipy.special.erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + scipy.special.erf(x / _SQRT2)) + \
        x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


class DenseLayer(object):
    """
    y = act(x W^T + b), applied row-wise to a batch.
    """
    def __init__(self, weight, bias, activation=IDENTITY):
        """
        :param weight: (out, in) Matrix
        :param bias: (out,) vector
        :param activation: 'identity' or 'gelu'
        """
        if activation not in ACTIVATIONS:
            raise ValueError('Unknown activation %s' % activation)
        self.weight = numeric.as_matrix(weight, 'weight').copy()
        self.bias = numeric.as_vector(bias, 'bias').copy()
        if self.bias.size != self.weight.shape[0]:
            raise ShapeMismatchError('bias of %i for a weight of %s' % (
                self.bias.size, self.weight.shape))
        self.activation = activation

    @classmethod
    def initialise(cls, n_in, n_out, activation, rng):
        """
        Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) weights and biases.
        """
        bound = 1.0 / np.sqrt(n_in)
        return cls(rng.uniform(-bound, bound, size=(n_out, n_in)),
                   rng.uniform(-bound, bound, size=n_out), activation)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def parameter_count(self):
        return self.weight.size + self.bias.size

    def forward(self, x, delta=None):
        """
        :param x: (n, in) batch
        :param delta: optional (out, in) weight update, e.g. a LoRA BA
        :return: (output, cache)
        """
        if x.shape[-1] != self.n_in:
            raise ShapeMismatchError('Layer expects width %i, got %s' % (
                self.n_in, x.shape))
        w = self.weight if delta is None else self.weight + delta
        pre = x @ w.T + self.bias
        out = gelu(pre) if self.activation == GELU else pre
        return out, (x, pre, w)

    def backward(self, grad_out, cache):
        """
        :return: (grad_x, grad_weight, grad_bias)
        """
        x, pre, w = cache
        dpre = grad_out * gelu_grad(pre) if self.activation == GELU else grad_out
        return dpre @ w, dpre.T @ x, dpre.sum(axis=0)

    def copy(self):
        return DenseLayer(self.weight, self.bias, self.activation)


def stack_forward(layers, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def stack_backward(layers, grad, caches, prefix=None, grads=None):
    """
    Backprop through a layer stack, recording parameter gradients under
    '<prefix>.<i>.weight' / '.bias' when prefix is given.
    """
    for ctr in reversed(range(len(layers))):
        grad, dw, db = layers[ctr].backward(grad, caches[ctr])
        if prefix is not None:
            grads['%s.%i.weight' % (prefix, ctr)] = dw
            grads['%s.%i.bias' % (prefix, ctr)] = db
    return grad


class LoRAAdapter(object):
    """
    The low-rank pair of a weight update, delta W = scale * B A.
    """
    def __init__(self, a, b, scale=1.0):
        """
        :param a: (r, q) Matrix
        :param b: (p, r) Matrix
        :param scale: multiplier on B A
        """
        self.a = numeric.as_matrix(a, 'a').copy()
        self.b = numeric.as_matrix(b, 'b').copy()
        if self.b.shape[1] != self.a.shape[0]:
            raise ShapeMismatchError('LoRA b %s does not match a %s' % (
                self.b.shape, self.a.shape))
        self.scale = float(scale)

    @classmethod
    def initialise(cls, p, q, rank, rng, scale=1.0):
        """
        A ~ uniform(-1/sqrt(q), 1/sqrt(q)), B = 0 so delta W starts at zero.

        :param p: output width of the adapted weight
        :param q: input width of the adapted weight
        :param rank: r, 1 <= r <= min(p, q) / 2
        """
        if rank < 1 or 2 * rank > min(p, q):
            raise ValueError('LoRA rank %s must satisfy 1 <= r <= min(%i, %i)/2'
                             % (rank, p, q))
        bound = 1.0 / np.sqrt(q)
        return cls(rng.uniform(-bound, bound, size=(rank, q)),
                   np.zeros((p, rank)), scale)

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def shape(self):
        return self.b.shape[0], self.a.shape[1]

    def parameter_count(self):
        p, q = self.shape
        return self.rank * (p + q)

    def delta(self):
        return self.scale * (self.b @ self.a)

    def grads_from_weight_grad(self, grad_weight):
        """
        Chain a gradient on the effective weight down to (A, B).

        :return: (grad_a, grad_b)
        """
        return self.scale * (self.b.T @ grad_weight), \
            self.scale * (grad_weight @ self.a.T)

    def copy(self):
        return LoRAAdapter(self.a, self.b, self.scale)

    def __repr__(self):
        return 'LoRAAdapter(p=%i, q=%i, r=%i, scale=%g)' % (
            self.shape + (self.rank, self.scale))


class LogitSequence(object):
    """
    S positions of V logits.
    """
    def __init__(self, data):
        self.data = numeric.as_matrix(data, 'logits')
        if self.data.shape[0] < 1:
            raise ShapeMismatchError('A logit sequence needs >= 1 position')

    @property
    def length(self):
        return self.data.shape[0]

    @property
    def vocab(self):
        return self.data.shape[1]

    def __repr__(self):
        return 'LogitSequence(S=%i, V=%i)' % (self.length, self.vocab)


class Backbone(object):
    """
    A frozen dense stack with one LoRA adapter per hidden layer, then a
    frozen head to the vocabulary. Tokens are processed independently, so
    any number of soft tokens can be fed.
    """
    def __init__(self, layers, adapters, head, soft_tokens):
        """
        :param layers: list of DenseLayer, width -> width
        :param adapters: list of LoRAAdapter, one per layer
        :param head: DenseLayer, width -> vocab
        :param soft_tokens: k_p this backbone's connector produces
        """
        if len(layers) != len(adapters):
            raise ShapeMismatchError('%i layers but %i adapters' % (
                len(layers), len(adapters)))
        for ctr, (layer, adapter) in enumerate(zip(layers, adapters)):
            if adapter.shape != layer.weight.shape:
                raise ShapeMismatchError('Adapter %i is %s for a %s layer' % (
                    ctr, adapter.shape, layer.weight.shape))
        self.layers = layers
        self.adapters = adapters
        self.head = head
        self.soft_tokens = int(soft_tokens)

    @classmethod
    def build(cls, width, depth, vocab, soft_tokens, rank, rng, scale=1.0):
        """
        :param width: d_b
        :param depth: number of adapted hidden layers
        :param vocab: V
        :param soft_tokens: k_p
        :param rank: LoRA rank r
        :param rng: numpy Generator for the frozen weights and adapter A's
        """
        layers = [DenseLayer.initialise(width, width, GELU, rng)
                  for _ in range(depth)]
        head = DenseLayer.initialise(width, vocab, IDENTITY, rng)
        adapters = [LoRAAdapter.initialise(width, width, rank, rng, scale)
                    for _ in range(depth)]
        return cls(layers, adapters, head, soft_tokens)

    @property
    def width(self):
        return self.head.n_in

    @property
    def vocab(self):
        return self.head.n_out

    @property
    def backbone(self):
        return self

    def topology(self):
        """
        [(p, q, r), ...] of the adapters, in layer order.
        """
        return [adapter.shape + (adapter.rank,) for adapter in self.adapters]

    def named_parameters(self):
        """
        OrderedDict name -> (array, group); frozen weights sit in the
        'backbone' group.
        """
        params = OrderedDict()
        for ctr, adapter in enumerate(self.adapters):
            params['adapters.%i.a' % ctr] = (adapter.a, ADAPTERS)
            params['adapters.%i.b' % ctr] = (adapter.b, ADAPTERS)
        for ctr, layer in enumerate(self.layers):
            params['backbone.%i.weight' % ctr] = (layer.weight, BACKBONE)
            params['backbone.%i.bias' % ctr] = (layer.bias, BACKBONE)
        params['head.weight'] = (self.head.weight, BACKBONE)
        params['head.bias'] = (self.head.bias, BACKBONE)
        return params

    def forward(self, tokens, use_lora=True):
        """
        :param tokens: (m, width) rows
        :return: ((m, vocab) logits, caches)
        """
        if tokens.shape[-1] != self.width:
            raise ShapeMismatchError('Backbone width is %i, tokens are %s' % (
                self.width, tokens.shape))
        caches = []
        x = tokens
        for layer, adapter in zip(self.layers, self.adapters):
            x, cache = layer.forward(x, adapter.delta() if use_lora else None)
            caches.append(cache)
        logits, head_cache = self.head.forward(x)
        caches.append(head_cache)
        return logits, caches

    def backward(self, grad_logits, caches, grads=None):
        """
        :return: grad of the tokens; adapter gradients go into grads as
            'adapters.<i>.a' / '.b' when grads is given
        """
        grad, _, _ = self.head.backward(grad_logits, caches[-1])
        for ctr in reversed(range(len(self.layers))):
            grad, dw, _ = self.layers[ctr].backward(grad, caches[ctr])
            if grads is not None:
                da, db = self.adapters[ctr].grads_from_weight_grad(dw)
                grads['adapters.%i.a' % ctr] = da
                grads['adapters.%i.b' % ctr] = db
        return grad

    def copy(self):
        return copy.deepcopy(self)


class UnifiedModel(object):
    """
    Encoders E, connector C and backbone B of one party. A device holds
    encoders and projectors for its own modalities only; the fusion layer
    always sees the full modality universe, absent slots zero-filled.
    """
    def __init__(self, universe, encoders, projectors, fusion,
                 soft_prompt_gen, backbone):
        """
        :param universe: ordered list of every modality of the experiment
        :param encoders: AttributeContainer modality -> list of DenseLayer
        :param projectors: AttributeContainer modality -> DenseLayer
        :param fusion: [DenseLayer, DenseLayer], |M|*d -> d
        :param soft_prompt_gen: [DenseLayer, DenseLayer], d -> k_p*d_b
        :param backbone: Backbone
        """
        self.universe = list(universe)
        self.encoders = encoders
        self.projectors = projectors
        self.fusion = fusion
        self.soft_prompt_gen = soft_prompt_gen
        self.backbone = backbone
        for modality in encoders.names():
            if modality not in self.universe:
                raise UnknownModalityError('Modality %s is not in %s' % (
                    modality, self.universe))
        self.latent_dim = fusion[-1].n_out
        if fusion[0].n_in != len(self.universe) * self.latent_dim:
            raise ShapeMismatchError('Fusion input %i != |M| * d = %i' % (
                fusion[0].n_in, len(self.universe) * self.latent_dim))
        if soft_prompt_gen[-1].n_out != backbone.soft_tokens * backbone.width:
            raise ShapeMismatchError(
                'Soft prompt generator emits %i floats, backbone expects '
                '%i x %i' % (soft_prompt_gen[-1].n_out, backbone.soft_tokens,
                             backbone.width))

    @classmethod
    def build(cls, modalities, universe, raw_dims, feature_dim, latent_dim,
              prompt_hidden, backbone, rng):
        """
        :param modalities: the modalities this party holds
        :param universe: every modality, in fusion-slot order
        :param raw_dims: modality -> raw input width
        :param feature_dim: encoder output width
        :param latent_dim: d
        :param prompt_hidden: hidden width of the soft-prompt generator
        :param backbone: Backbone, owned by the new model
        :param rng: numpy Generator for encoders and connector
        """
        modalities = [m for m in universe if m in set(modalities)]
        encoders = AttributeContainer(
            (m, [DenseLayer.initialise(raw_dims[m], feature_dim, GELU, rng)])
            for m in modalities)
        projectors = AttributeContainer(
            (m, DenseLayer.initialise(feature_dim, latent_dim, IDENTITY, rng))
            for m in modalities)
        fusion = [DenseLayer.initialise(len(universe) * latent_dim, latent_dim,
                                        GELU, rng),
                  DenseLayer.initialise(latent_dim, latent_dim, IDENTITY, rng)]
        soft_prompt_gen = [
            DenseLayer.initialise(latent_dim, prompt_hidden, GELU, rng),
            DenseLayer.initialise(prompt_hidden,
                                  backbone.soft_tokens * backbone.width,
                                  IDENTITY, rng)]
        return cls(universe, encoders, projectors, fusion, soft_prompt_gen,
                   backbone)

    @property
    def modalities(self):
        return self.encoders.names()

    @property
    def adapters(self):
        return self.backbone.adapters

    def named_parameters(self):
        """
        OrderedDict name -> (array, group) over every parameter.
        """
        params = OrderedDict()
        for modality, stack in self.encoders.items():
            for ctr, layer in enumerate(stack):
                params['encoders.%s.%i.weight' % (modality, ctr)] = (layer.weight, ENCODERS)
                params['encoders.%s.%i.bias' % (modality, ctr)] = (layer.bias, ENCODERS)
        for modality, layer in self.projectors.items():
            params['projectors.%s.weight' % modality] = (layer.weight, PROJECTORS)
            params['projectors.%s.bias' % modality] = (layer.bias, PROJECTORS)
        for prefix, stack in ((FUSION, self.fusion),
                              (SOFT_PROMPT, self.soft_prompt_gen)):
            for ctr, layer in enumerate(stack):
                params['%s.%i.weight' % (prefix, ctr)] = (layer.weight, prefix)
                params['%s.%i.bias' % (prefix, ctr)] = (layer.bias, prefix)
        params.update(self.backbone.named_parameters())
        return params

    def copy(self):
        return copy.deepcopy(self)


# region -- parameter bookkeeping --

def parameters_in(model, groups):
    """
    OrderedDict name -> array for the given groups.
    """
    return OrderedDict((name, arr) for name, (arr, group)
                       in model.named_parameters().items() if group in groups)


def parameter_count(model, groups=None):
    return int(sum(arr.size for name, (arr, group)
                   in model.named_parameters().items()
                   if groups is None or group in groups))


def group_digest(model, groups):
    """
    Digest of every parameter in the given groups.
    """
    return digest(list(parameters_in(model, groups).values()))


def frozen_digest(model):
    return group_digest(model, (BACKBONE,))


def check_trainable(groups):
    for group in groups:
        if group == BACKBONE:
            raise FrozenParameterError('The backbone weights W are frozen; '
                                       'no gradient is available for them')
        if group not in TRAINABLE_GROUPS:
            raise ValueError('Unknown parameter group %s' % group)


def sgd_step(model, grads, lr):
    """
    In-place p -= lr * grad for every gradient given.
    """
    params = model.named_parameters()
    for name, grad in grads.items():
        arr, group = params[name]
        if group == BACKBONE:
            raise FrozenParameterError('Refusing to update frozen %s' % name)
        arr -= lr * grad

# endregion


# region -- single-sample operations --

def _stack_for(model, modality):
    try:
        return model.encoders[modality]
    except KeyError:
        raise UnknownModalityError('Model holds no encoder for modality %s '
                                   '(has %s)' % (modality, model.modalities))


def encode(model, modality, x):
    """
    z(m) = E^m(x(m)).
    """
    stack = _stack_for(model, modality)
    x = numeric.as_vector(x, 'x(%s)' % modality)
    return stack_forward(stack, x[None, :])[0][0]


def normalise_rows(raw, modality=''):
    norms = np.linalg.norm(raw, axis=1)
    degenerate = norms < DEGENERATE_NORM
    safe = np.where(degenerate, 1.0, norms)
    reps = raw / safe[:, None]
    if np.any(degenerate):
        LOGGER.warning('%i zero-norm representation(s) of %s replaced by e1' % (
            np.count_nonzero(degenerate), modality or 'fusion'))
        reps[degenerate] = 0.0
        reps[degenerate, 0] = 1.0
    return reps, safe, degenerate


def project(model, modality, z):
    """
    h(m) = f^p(z(m)), L2-normalised.
    """
    _stack_for(model, modality)
    z = numeric.as_vector(z, 'z(%s)' % modality)
    raw, _ = model.projectors[modality].forward(z[None, :])
    return normalise_rows(raw, modality)[0][0]


def fusion_input(model, reps, n=None):
    """
    Zero-imputed, modality-ordered concatenation of the given
    representations, shape (n, |M| * d).
    """
    if len(reps) == 0:
        raise ValueError('Cannot fuse an empty set of representations')
    d = model.latent_dim
    for modality, rep in reps.items():
        if modality not in model.universe:
            raise UnknownModalityError('Modality %s is not in %s' % (
                modality, model.universe))
        if rep.shape[-1] != d:
            raise ShapeMismatchError('Representation of %s has width %i, '
                                     'expected %i' % (modality, rep.shape[-1], d))
    if n is None:
        n = next(iter(reps.values())).shape[0]
    slots = [reps[m] if m in reps else np.zeros((n, d)) for m in model.universe]
    return np.concatenate(slots, axis=1)


def fuse(model, reps):
    """
    s = f_u(h(m_1), ..., h(m_|M|)) with absent modalities zero-filled.

    :param reps: dict modality -> d-vector
    """
    reps = OrderedDict((m, numeric.as_vector(v, 'h(%s)' % m)[None, :])
                       for m, v in reps.items())
    return stack_forward(model.fusion, fusion_input(model, reps))[0][0]


def soft_prompt(model, s):
    """
    k_p soft tokens of width d_b from the fused vector s.
    """
    s = numeric.as_vector(s, 's')
    if s.size != model.latent_dim:
        raise ShapeMismatchError('Fused vector has width %i, expected %i' % (
            s.size, model.latent_dim))
    flat = stack_forward(model.soft_prompt_gen, s[None, :])[0][0]
    return flat.reshape(model.backbone.soft_tokens, model.backbone.width)


def backbone_forward(model, prompt_tokens, use_lora=True):
    """
    Logits of each soft token through W (+ B A when use_lora).

    :param model: UnifiedModel or Backbone
    :param prompt_tokens: (S, d_b) Matrix
    :return: LogitSequence of length S
    """
    tokens = numeric.as_matrix(prompt_tokens, 'prompt_tokens')
    logits, _ = model.backbone.forward(tokens, use_lora)
    return LogitSequence(logits)


def supervised_loss(logits, label):
    """
    Mean over positions of -log softmax(logits)[label].
    """
    if not 0 <= label < logits.vocab:
        raise ValueError('Label %s out of range for vocab %i' % (
            label, logits.vocab))
    return float(-np.mean(numeric.log_softmax(logits.data)[:, label]))


def extract_lora(model):
    """
    Deep copies of the adapters, in layer order.
    """
    return [adapter.copy() for adapter in model.backbone.adapters]


def apply_lora(model, adapters):
    """
    Overwrite the model's adapters elementwise with the given ones.
    """
    own = model.backbone.adapters
    if len(own) != len(adapters):
        raise ShapeMismatchError('Model has %i adapters, got %i' % (
            len(own), len(adapters)))
    for ctr, (mine, theirs) in enumerate(zip(own, adapters)):
        if mine.a.shape != theirs.a.shape or mine.b.shape != theirs.b.shape:
            raise ShapeMismatchError(
                'Adapter %i shapes differ: a %s vs %s, b %s vs %s' % (
                    ctr, mine.a.shape, theirs.a.shape, mine.b.shape,
                    theirs.b.shape))
    for mine, theirs in zip(own, adapters):
        mine.a[...] = theirs.a
        mine.b[...] = theirs.b
        mine.scale = theirs.scale

# endregion


# region -- batched forward / backward --

class ForwardTrace(object):
    """
    Everything a batched forward pass recorded, enough to backprop.
    """
    def __init__(self):
        self.n = 0
        self.z = OrderedDict()
        self.h = OrderedDict()
        self.encoder_caches = {}
        self.projector_caches = {}
        self.norms = {}
        self.degenerate = {}
        self.fusion_caches = None
        self.s = None
        self.prompt_caches = None
        self.prompts = None
        self.backbone_caches = None
        self.logits = None


def forward(model, inputs, use_lora=True):
    """
    Batched forward through encoders, projectors, fusion, soft-prompt
    generator and backbone.

    :param model: UnifiedModel
    :param inputs: dict modality -> (n, raw) array
    :return: ForwardTrace
    """
    if len(inputs) == 0:
        raise ValueError('No modalities given to forward')
    trace = ForwardTrace()
    for modality in inputs:
        _stack_for(model, modality)
    for modality in model.universe:
        if modality not in inputs:
            continue
        x = np.asarray(inputs[modality], dtype=np.float64)
        z, trace.encoder_caches[modality] = stack_forward(
            model.encoders[modality], x)
        raw, trace.projector_caches[modality] = \
            model.projectors[modality].forward(z)
        h, trace.norms[modality], trace.degenerate[modality] = \
            normalise_rows(raw, modality)
        trace.z[modality] = z
        trace.h[modality] = h
    trace.n = next(iter(trace.h.values())).shape[0]
    trace.s, trace.fusion_caches = stack_forward(
        model.fusion, fusion_input(model, trace.h, trace.n))
    flat, trace.prompt_caches = stack_forward(model.soft_prompt_gen, trace.s)
    backbone = model.backbone
    trace.prompts = flat.reshape(trace.n, backbone.soft_tokens, backbone.width)
    logits, trace.backbone_caches = backbone.forward(
        flat.reshape(-1, backbone.width), use_lora)
    trace.logits = logits.reshape(trace.n, backbone.soft_tokens, backbone.vocab)
    return trace


def backward(model, trace, grad_logits=None, grad_h=None,
             groups=TRAINABLE_GROUPS):
    """
    Backprop the recorded computation.

    :param model: the UnifiedModel the trace came from
    :param trace: ForwardTrace
    :param grad_logits: dL/dlogits, (n, k_p, V), or None
    :param grad_h: dict modality -> dL/dh (n, d) for losses on the
        projected representations (the contrastive terms), or None
    :param groups: which parameter groups to return gradients for
    :return: OrderedDict parameter name -> gradient
    """
    check_trainable(groups)
    grads = OrderedDict()
    n, d = trace.n, model.latent_dim
    backbone = model.backbone
    dh = OrderedDict((m, np.zeros((n, d))) for m in trace.h)
    if grad_h:
        for modality, grad in grad_h.items():
            if modality not in dh:
                raise UnknownModalityError('No representation of %s in the '
                                           'trace' % modality)
            dh[modality] = dh[modality] + grad

    if grad_logits is not None:
        adapter_grads = OrderedDict() if ADAPTERS in groups else None
        dtokens = backbone.backward(grad_logits.reshape(-1, backbone.vocab),
                                    trace.backbone_caches, adapter_grads)
        if adapter_grads:
            grads.update(adapter_grads)
        ds = stack_backward(model.soft_prompt_gen, dtokens.reshape(n, -1),
                            trace.prompt_caches,
                            SOFT_PROMPT if SOFT_PROMPT in groups else None, grads)
        dfused = stack_backward(model.fusion, ds, trace.fusion_caches,
                                FUSION if FUSION in groups else None, grads)
        for slot, modality in enumerate(model.universe):
            if modality in dh:
                dh[modality] += dfused[:, slot * d:(slot + 1) * d]

    if PROJECTORS not in groups and ENCODERS not in groups:
        return grads
    for modality, grad in dh.items():
        h = trace.h[modality]
        draw = (grad - h * np.sum(h * grad, axis=1, keepdims=True)) / \
            trace.norms[modality][:, None]
        draw[trace.degenerate[modality]] = 0.0
        dz, dw, db = model.projectors[modality].backward(
            draw, trace.projector_caches[modality])
        if PROJECTORS in groups:
            grads['projectors.%s.weight' % modality] = dw
            grads['projectors.%s.bias' % modality] = db
        if ENCODERS in groups:
            stack_backward(model.encoders[modality], dz,
                           trace.encoder_caches[modality],
                           '%s.%s' % (ENCODERS, modality), grads)
    return grads


def cross_entropy_and_grad(logits, labels):
    """
    Mean over samples and positions of -log softmax(logits)[label].

    :param logits: (n, S, V)
    :param labels: (n,) int
    :return: (loss, dL/dlogits)
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, length, vocab = logits.shape
    if np.any(labels < 0) or np.any(labels >= vocab):
        raise ValueError('Labels out of range for vocab %i' % vocab)
    log_probs = numeric.log_softmax(logits, axis=-1)
    picked = log_probs[np.arange(n), :, labels]
    loss = float(-np.mean(picked))
    grad = np.exp(log_probs)
    grad[np.arange(n), :, labels] -= 1.0
    return loss, grad / (n * length)


def predict(model, inputs, use_lora=True):
    """
    Class ids from the argmax of the position-averaged logits.
    """
    trace = forward(model, inputs, use_lora)
    return np.argmax(trace.logits.mean(axis=1), axis=1)

# endregion

# end
