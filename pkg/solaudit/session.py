from datetime import datetime, timezone

from box import Box

from . import utils
from .app import ConfigError, config, logger
from .backend import EndpointConfig, HttpBackend, ScriptedBackend, Transcript
from .prompts import Label, PromptKit, load_kit

ROLES = ("detector", "reasoner", "agents", "judge")
CONTEXT_MODES = ("none", "call", "both")

FIXED_TIME = datetime(2024, 1, 1, tzinfo=timezone.utc)


def system_clock():
    return datetime.now(timezone.utc)


def fixed_clock():
    return FIXED_TIME


class Session:
    """Everything one run needs: validated settings, the backend and the prompt kit.

    Args:
        conf (ConfigBox, optional): run config. Defaults to the global config.
        backend (Backend, optional): Defaults to an HTTP backend, logging to `transcript` if configured.
        prompts (PromptKit, optional): Defaults to the kit of `templates`, or the packaged one.
        clock (callable, optional): returns the datetime stamped into reports.
    """

    def __init__(self, conf=None, backend=None, prompts: PromptKit = None, clock=None):
        self.conf = conf if conf is not None else config.__subject__
        self.prompts = prompts or load_kit(self.conf.get("templates"))
        if backend is None:
            transcript = Transcript(self.conf.transcript) if self.conf.get("transcript") else None
            backend = HttpBackend(transcript=transcript)
        self.backend = backend
        self.clock = clock or (fixed_clock if isinstance(backend, ScriptedBackend) else system_clock)
        self.validate()

    def validate(self):
        try:
            m = int(self.conf.detector.prompts)
            mode = self.conf.detector.context
            iterations = int(self.conf.deliberation.max_iterations)
            attempts = int(self.conf.deliberation.reply_attempts)
            parallelism = int(self.conf.parallelism)
            workers = int(self.conf.workers)
            budget = int(self.conf.context_budget)
            Label(self.conf.label_precedence)
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid run config: {e}") from None
        n = len(self.prompts.detector_variants)
        if not 1 <= m <= n:
            raise ConfigError(f"detector.prompts must be within 1..{n}, got {m}.")
        if mode not in CONTEXT_MODES:
            raise ConfigError(f'detector.context must be one of {", ".join(CONTEXT_MODES)}, got "{mode}".')
        if not 1 <= iterations <= 5:
            raise ConfigError(f"deliberation.max_iterations must be within 1..5, got {iterations}.")
        if attempts < 1:
            raise ConfigError(f"deliberation.reply_attempts must be positive, got {attempts}.")
        if parallelism < 1 or workers < 1:
            raise ConfigError("parallelism and workers must be positive.")
        if budget <= 0:
            raise ConfigError(f"context_budget must be positive, got {budget}.")
        for role in ROLES:
            self.endpoint(role)

    def endpoint(self, role) -> EndpointConfig:
        """Endpoint of a role, its block merged over `endpoint.default`."""
        if role not in ROLES:
            raise ConfigError(f'unknown endpoint role "{role}".')
        merged = Box(self.conf.endpoint.default.to_dict())
        merged.merge_update(self.conf.endpoint.get(role) or {})
        return EndpointConfig.from_dict(merged.to_dict())

    @property
    def m(self):
        return int(self.conf.detector.prompts)

    @property
    def detector_context(self):
        return self.conf.detector.context

    @property
    def max_iterations(self):
        return int(self.conf.deliberation.max_iterations)

    @property
    def reply_attempts(self):
        return int(self.conf.deliberation.reply_attempts)

    @property
    def parallelism(self):
        return int(self.conf.parallelism)

    @property
    def workers(self):
        return int(self.conf.workers)

    @property
    def explain_safe(self):
        return bool(self.conf.explain_safe)

    @property
    def context_budget(self):
        return int(self.conf.context_budget)

    @property
    def seed(self):
        return int(self.conf.seed)

    @property
    def precedence(self):
        return Label(self.conf.label_precedence)

    @property
    def config_hash(self):
        return utils.sha256_hex(utils.dumps(self.conf.to_dict()))

    def complete_many(self, role, prompts):
        return self.backend.complete_many(self.endpoint(role), prompts, self.parallelism)

    def complete(self, role, prompt):
        return self.backend.complete(self.endpoint(role), prompt)
