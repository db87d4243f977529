#!/usr/bin/env python3
"""Run advranking experiments.

Can be installed and run as management binary:
    advranking-manage attack --model ct --kind CA+ --epsilon 0.3
"""

import os
import sys

from django.core.management import execute_from_command_line

from advranking.envfile import load_env_file

#: Minimal environment necessary for successful execution
MINIMAL_ENVIRONMENT = {
    "DJANGO_SETTINGS_MODULE": "advranking.settings",
    "LANG": "C.utf-8",
    "LC_CTYPE": "C.utf-8",
}


def main(argv=None):
    for envvar, value in MINIMAL_ENVIRONMENT.items():
        os.environ.setdefault(envvar, value)

    load_env_file()

    execute_from_command_line(argv or sys.argv)


if __name__ == "__main__":
    main()
