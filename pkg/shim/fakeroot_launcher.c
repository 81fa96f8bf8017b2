/* fakeroot: run a command in the apparently-privileged environment.
 *
 * Resolved from PATH when a build step is rewritten to start with
 * "fakeroot". The sandbox already exported LD_PRELOAD and the database
 * endpoint for the whole step, so launching is a plain exec; the command
 * exists so recipes and init-step checks that look for fakeroot find one
 * without installing anything into the image.
 */

#include <errno.h>
#include <stdio.h>
#include <string.h>
#include <unistd.h>

int main(int argc, char **argv) {
    if (argc < 2) {
        fprintf(stderr, "usage: fakeroot COMMAND [ARGS...]\n");
        return 2;
    }
    execvp(argv[1], argv + 1);
    fprintf(stderr, "fakeroot: %s: %s\n", argv[1], strerror(errno));
    return 127;
}
