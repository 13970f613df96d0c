import json
import logging
import os
from typing import Dict, Optional

from dotenv import load_dotenv

from memory.base import DEFAULT_BUDGET_TOKENS, DEFAULT_FRACTIONS, MemorySource, TokenBudget
from memory.errors import BudgetError, ConfigError
from memory.policy import Policy, PolicyName, policy_for

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = 'mmag.json'
BACKENDS = ('mock', 'silent', 'remote')
SUMMARIZERS = ('extractive', 'none', 'backend')

DEFAULTS = {
    'store_path': 'mmag_data/store',
    'keyring_path': 'mmag_data/keyring.json',
    'backend': 'mock',
    'backend_url': None,
    'backend_headers': {},
    'backend_timeout_s': 30.0,
    'policy': PolicyName.RECENCY_FIRST.value,
    'policies': {},
    'budget': DEFAULT_BUDGET_TOKENS,
    'fractions': {},
    'providers': {},
    'fake_now': None,
    'summarizer': 'extractive',
    'log_level': 'WARNING',
    'durable': True,
}

ENV_OVERRIDES = {
    'MMAG_STORE': 'store_path',
    'MMAG_KEYRING': 'keyring_path',
    'MMAG_BACKEND_URL': 'backend_url',
    'MMAG_FAKE_NOW': 'fake_now',
    'MMAG_LOG_LEVEL': 'log_level',
}


class Config:
    """Effective settings: defaults, then the JSON config file, then environment variables."""

    def __init__(self, values: Optional[Dict] = None):
        values = dict(values or {})
        unknown = set(values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")
        merged = json.loads(json.dumps(DEFAULTS))
        merged.update(values)
        for key, value in merged.items():
            setattr(self, key, value)

    @classmethod
    def load(cls, path: Optional[str] = None, env: Optional[Dict[str, str]] = None) -> "Config":
        load_dotenv()
        env = os.environ if env is None else env
        values = {}
        explicit = path is not None
        path = path or env.get('MMAG_CONFIG') or DEFAULT_CONFIG_FILE
        if os.path.exists(path):
            try:
                with open(path) as f:
                    values = json.load(f)
            except (OSError, ValueError) as e:
                raise ConfigError(f"Cannot read config file {path}: {e}")
            if not isinstance(values, dict):
                raise ConfigError(f"Config file {path} must hold a JSON object")
            logger.info(f"Loaded config from {path}")
        elif explicit:
            logger.warning(f"Config file {path} not found, using defaults")
        for var, key in ENV_OVERRIDES.items():
            if env.get(var):
                values[key] = env[var]
        config = cls(values)
        config.validate()
        return config

    def validate(self) -> "Config":
        if self.backend not in BACKENDS:
            raise ConfigError(f"Unknown backend '{self.backend}', expected one of {', '.join(BACKENDS)}")
        if self.backend == 'remote' and not self.backend_url:
            raise ConfigError("Remote backend needs backend_url or MMAG_BACKEND_URL")
        if self.summarizer not in SUMMARIZERS:
            raise ConfigError(f"Unknown summarizer '{self.summarizer}'")
        try:
            self.budget = int(self.budget)
        except (TypeError, ValueError):
            raise ConfigError(f"Budget must be an integer, got {self.budget!r}")
        try:
            self.token_budget()
        except BudgetError as e:
            raise ConfigError(str(e))
        self.default_policy()
        for name in self.policies:
            self.policy_named(name)
        for kind, spec in self.providers.items():
            if not isinstance(spec, dict) or not {'static', 'http', 'work_hours'} & set(spec):
                raise ConfigError(f"Provider '{kind}' needs one of: static, http, work_hours")
        if str(self.log_level).upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"Unknown log level '{self.log_level}'")
        return self

    def token_budget(self, scale: float = 1.0) -> TokenBudget:
        fractions = dict(DEFAULT_FRACTIONS)
        for source, fraction in self.fractions.items():
            try:
                fractions[MemorySource(source)] = float(fraction)
            except ValueError:
                raise ConfigError(f"Unknown memory source '{source}' in fractions")
        budget = TokenBudget(self.budget, fractions)
        return budget if scale == 1.0 else budget.scaled(scale)

    def policy_named(self, name: str) -> Policy:
        return policy_for(name, self.policies.get(name))

    def default_policy(self) -> Policy:
        return self.policy_named(self.policy)

    def to_dict(self) -> Dict:
        return {key: getattr(self, key) for key in DEFAULTS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
