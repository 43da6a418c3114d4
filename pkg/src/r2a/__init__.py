"""Transfer human rationales from label-rich source tasks into attention
supervision for a low-resource target task.

Modules: ``numerics`` (autodiff), ``corpus`` (data), ``nets`` (layers),
``model`` (the joint R2A model), ``rationalizer``, ``trainer`` (target side),
``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
