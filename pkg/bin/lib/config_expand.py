from typing import Any, MutableMapping, Sequence

import jinja2

from lib.errors import ConfigError

MAX_ITERS = 5

JINJA_ENV = jinja2.Environment(undefined=jinja2.StrictUndefined)


def needs_expansion(target: MutableMapping[str, Any]) -> bool:
    return any(isinstance(value, str) and '{' in value for value in target.values())


def expand_one(template_string: str, configuration: MutableMapping[str, Any]) -> str:
    jinjad = JINJA_ENV.from_string(template_string).render(**configuration)
    return jinjad.format(**configuration)


def expand_target(target: MutableMapping[str, Any], context: Sequence[str]) -> MutableMapping[str, Any]:
    """
    Expand ``{name}`` and ``{{ name }}`` references between the string values of
    ``target`` in place. References may chain; expansion stops after MAX_ITERS passes.
    """
    iterations = 0
    while needs_expansion(target):
        iterations += 1
        if iterations > MAX_ITERS:
            raise ConfigError(f"Too many mutual references (in {'/'.join(context)})")
        for key, value in target.items():
            if not isinstance(value, str):
                continue
            try:
                target[key] = expand_one(value, target)
            except KeyError as ke:
                raise ConfigError(f"Unable to find key {ke} in {value} (in {'/'.join(context)})") from ke
            except (jinja2.TemplateError, IndexError, ValueError) as e:
                raise ConfigError(f"Unable to expand {value} ({e}) (in {'/'.join(context)})") from e
    return target
