import copy
import logging
import os
from functools import cached_property
from pathlib import Path

from box import BoxError, ConfigBox
from dotenv import load_dotenv

from .utils import ProxyBase

_ENDPOINT = {
    "base_url": "http://localhost:8000/v1",
    "model": "codellama-13b-instruct",
    "temperature": 0.0,
    "max_tokens": 512,
    "timeout": 60,
    "max_retries": 3,
    "backoff_factor": 1.0,
    "api_key_env": "SOLAUDIT_API_KEY",
}

DEFAULT_CONF = {
    "endpoint": {
        "default": _ENDPOINT,
        "detector": {},
        "reasoner": {},
        "agents": {"model": "mixtral-8x7b-instruct", "max_tokens": 1024},
        "judge": {},
    },
    "templates": None,
    "detector": {"prompts": 5, "context": "none"},
    "deliberation": {"max_iterations": 5, "reply_attempts": 3},
    "parallelism": 5,
    "workers": 4,
    "explain_safe": True,
    "context_budget": 4000,
    "seed": 42,
    "label_precedence": "vulnerable",
    "transcript": None,
}


logger = logging.getLogger("solaudit")

load_dotenv()


class AuditError(RuntimeError):
    pass


class ConfigError(BoxError):
    pass


def new_conf(overrides=None) -> ConfigBox:
    """A fresh config box of the defaults, optionally updated by a (nested) dict."""
    box = ConfigBox(copy.deepcopy(DEFAULT_CONF), box_dots=True)
    if overrides:
        box.merge_update(overrides)
    return box


class Config(ProxyBase):
    __noproxy__ = ("conf_file",)

    def __init__(self, conf_file=None):
        self.conf_file = conf_file

    @cached_property
    def __subject__(self):
        return self.reload_conf(conf_file=self.conf_file)

    def load(self, conf_file):
        """Point the global config to another file, dropping what was loaded before."""
        self.conf_file = conf_file
        object.__getattribute__(self, "__dict__").pop("__subject__", None)

    @staticmethod
    def reload_conf(box=None, conf_file=None):
        """Load config from provided file, $SOLAUDIT_CONFIG or config.yaml at cwd."""
        if not box:
            box = new_conf()
        if conf_file:
            conf_file = Path(conf_file)
        elif os.environ.get("SOLAUDIT_CONFIG"):
            conf_file = Path(os.environ["SOLAUDIT_CONFIG"])
            logger.debug(f'Found config file "{conf_file}" from envvar "SOLAUDIT_CONFIG".')
        elif Path("./config.yaml").is_file():
            conf_file = Path("./config.yaml")
        else:
            logger.debug("No config found from provided file, envvar or ./config.yaml.")
        if conf_file:
            logger.debug(f'Loading config from "{conf_file}".')
            if conf_file.suffix.lower() in (".yaml", ".yml"):
                box.merge_update(ConfigBox.from_yaml(filename=conf_file))
            else:
                raise ConfigError(f'can not load config file "{conf_file}", a yaml file is required.')
        return box

    def __getitem__(self, arg):
        try:
            return self.__subject__[arg]
        except BoxError:
            raise ConfigError(f'can not find config key "{arg}", please check your config file.') from None


config = Config()
