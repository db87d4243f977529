"""Environment file support.

Experiment configuration lives in a systemd-style environment file:
``KEY=VALUE`` lines, ``#`` or ``;`` comments, backslash continuation and
optional double quotes around values.
"""

import os
from collections import deque
from itertools import filterfalse
from operator import methodcaller
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, TextIO
from warnings import warn

#: Variable naming an explicit environment file
CONFIG_ENVVAR = "ADVRANK_CONFIG"
#: Paths searched for environment file after $ADVRANK_CONFIG
ENV_PATHS = [Path.cwd() / "advranking.env", Path("/etc/advranking/advranking.env")]


def parse_env_file(file: Iterable[str]) -> Dict[str, str]:
    """Parse environment file in similar way to SystemD unit file.

    Keyword arguments:
        file: The file-like object to parse.

    Returns:
        A dictionary with the parsed keys.
    """

    def is_comment(line):
        return line.lstrip().startswith(("#", ";")) or "=" not in line

    def concat_lines(line_iter):
        """Concatenate backslash-ending lines"""

        buffer = deque()

        for line in line_iter:
            if line.endswith("\\"):
                buffer.append(line[:-1])
            else:
                buffer.append(line)
                yield "".join(buffer)
                buffer.clear()

        if buffer:  # continuation on the last line
            yield "".join(buffer)

    def strip(line):
        # First strip whitespace, then any double quotes
        return line.strip().strip('"')

    line_iter = map(methodcaller("rstrip", "\r\n"), file)
    line_iter = filter(None, line_iter)  # empty lines
    line_iter = concat_lines(line_iter)
    line_iter = filterfalse(is_comment, line_iter)

    split_iter = map(methodcaller("partition", "="), line_iter)

    return {key.strip(): strip(value) for key, _sep, value in split_iter}


def candidate_paths(environ=os.environ) -> Sequence[Path]:
    explicit = environ.get(CONFIG_ENVVAR)
    return ([Path(explicit)] if explicit else []) + ENV_PATHS


def load_env_file(
    candidate_path_list: Optional[Sequence[Path]] = None, environ=os.environ
) -> Optional[Path]:
    """Load configuration from environment file.

    Keyword arguments:
        candidate_path_list: List of paths to try to read configuration from;
            first readable will be used.
            If none exists, a warning will be issued.
        environ: Mapping to update; values already present are kept.

    Returns:
        The file used, if any.
    """

    if candidate_path_list is None:
        candidate_path_list = candidate_paths(environ)

    for candidate in candidate_path_list:
        if os.access(candidate, os.R_OK):
            configuration = Path(candidate)
            break
    else:
        warn("No readable environment file found; using default configuration.")
        return None

    with configuration.open(encoding="utf-8") as file:
        for key, value in parse_env_file(file).items():
            environ.setdefault(key, value)
    return configuration
