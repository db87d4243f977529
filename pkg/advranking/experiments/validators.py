import re
from django.core.validators import MaxValueValidator, MinValueValidator, RegexValidator
from django.utils.translation import gettext_lazy as _

# '/' and '>' are reserved for the composite labels of transfer, universal and xi-search cells
label_re = re.compile(r'^[a-zA-Z0-9][a-zA-Z0-9_.+-]*$')
validate_label = RegexValidator(label_re, _('Enter a valid checkpoint name consisting of letters, numbers, underscores, hyphens, pluses or dots.'), 'invalid')

# Perturbation radii and normalized ranks both live in [0, 1]
unit_interval = [MinValueValidator(0.0), MaxValueValidator(1.0)]
