"""Exception hierarchy shared by services, routes and the CLI."""


class DeformSdfError(Exception):
    """Base class for all errors raised by this package"""

    exit_code = 1


class ConfigurationError(DeformSdfError, ValueError):
    """Invalid configuration or a tensor/spec shape mismatch"""

    exit_code = 1


class UsageError(DeformSdfError):
    """An API or command line used outside its contract"""

    exit_code = 1


class IdentityLookupError(DeformSdfError, KeyError):
    """An identity that is not registered in the code book"""

    exit_code = 2

    def __str__(self) -> str:
        # KeyError would quote the message
        return str(self.args[0]) if self.args else "unknown identity"


class CapabilityError(DeformSdfError):
    """A stage-2 operation requested on a stage-1 model"""

    exit_code = 1


class ContractError(DeformSdfError):
    """Feature dimensions or stage tags that do not line up"""

    exit_code = 1


class DataError(DeformSdfError):
    """Bad input data: manifests, cameras, images, pixel coordinates, empty sets"""

    exit_code = 2


class NumericFailure(DeformSdfError):
    """A loss or field value became non-finite"""

    exit_code = 3
