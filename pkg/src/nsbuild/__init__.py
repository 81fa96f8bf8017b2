"""nsbuild: a fully unprivileged container image builder.

Interprets a Dockerfile subset, executes build steps inside unprivileged
user+mount namespaces, auto-injects a root-faking wrapper so distribution
package managers succeed without privilege, and pulls/pushes OCI images.
"""

__version__ = "0.1.0"
