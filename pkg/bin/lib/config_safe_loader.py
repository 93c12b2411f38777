import re
from typing import Any, TextIO, Union

import yaml

FLOAT_TAG = 'tag:yaml.org,2002:float'
TIMESTAMP_TAG = 'tag:yaml.org,2002:timestamp'

# Like YAML 1.1 floats, but the dot is optional when there is an exponent ("1e-4").
FLOAT_PATTERN = re.compile(r'''^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                              |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                              |\.[0-9_]+(?:[eE][-+][0-9]+)?
                              |[-+]?\.(?:inf|Inf|INF)
                              |\.(?:nan|NaN|NAN))$''', re.X)


class ConfigSafeLoader(yaml.SafeLoader):
    """
    Safe loader for run configurations and calibration files: ISO dates stay strings
    (see https://stackoverflow.com/questions/34667108/ignore-dates-and-times-while-parsing-yaml)
    and exponent floats without a dot load as floats.
    """

    @classmethod
    def without_resolver(cls, tag: str) -> None:
        # copy first so yaml.SafeLoader's own table is left alone
        inherited = cls.__dict__.get('yaml_implicit_resolvers', cls.yaml_implicit_resolvers)
        cls.yaml_implicit_resolvers = {first: [(t, regexp) for t, regexp in resolvers if t != tag]
                                       for first, resolvers in inherited.items()}


ConfigSafeLoader.without_resolver(TIMESTAMP_TAG)
ConfigSafeLoader.without_resolver(FLOAT_TAG)
ConfigSafeLoader.add_implicit_resolver(FLOAT_TAG, FLOAT_PATTERN, list('-+0123456789.'))


def load_yaml(stream: Union[str, TextIO]) -> Any:
    return yaml.load(stream, Loader=ConfigSafeLoader)
