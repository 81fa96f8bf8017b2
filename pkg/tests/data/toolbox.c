/* Multi-call userland for test root filesystems.
 *
 * Installed once per fixture image and symlinked as the individual tool
 * names; argv[0] picks the applet. Privileged operations (chown, mknod,
 * the apt-style privilege drop) perform the real system calls so failures
 * are the kernel's verdict, except when STUB_FAKEROOT is set, which is how
 * the fixture's image-installed fakeroot stand-in marks its children.
 *
 * Dynamically linked on purpose: preload interposition cannot wrap static
 * executables, and the shim tests need to wrap these.
 */

#define _GNU_SOURCE
#include <dirent.h>
#include <errno.h>
#include <fcntl.h>
#include <grp.h>
#include <limits.h>
#include <regex.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <sys/types.h>
#include <time.h>
#include <unistd.h>

static int faked(void) {
    return getenv("STUB_FAKEROOT") != NULL;
}

/* --- tiny /etc/passwd + /etc/group lookups (no NSS in the fixture) --- */

static long lookup_id(const char *dbfile, const char *name) {
    FILE *fh = fopen(dbfile, "r");
    char line[512];
    if (fh == NULL)
        return -1;
    while (fgets(line, sizeof line, fh) != NULL) {
        char *p = strchr(line, ':');
        if (p == NULL)
            continue;
        *p = '\0';
        if (strcmp(line, name) != 0)
            continue;
        p = strchr(p + 1, ':');            /* skip password field */
        if (p == NULL)
            continue;
        fclose(fh);
        return strtol(p + 1, NULL, 10);
    }
    fclose(fh);
    return -1;
}

static const char *lookup_name(const char *dbfile, unsigned long id) {
    static char name[128];
    FILE *fh = fopen(dbfile, "r");
    char line[512];
    if (fh == NULL)
        return NULL;
    while (fgets(line, sizeof line, fh) != NULL) {
        char *f1 = strchr(line, ':');
        if (f1 == NULL)
            continue;
        *f1 = '\0';
        char *f2 = strchr(f1 + 1, ':');
        if (f2 == NULL)
            continue;
        if (strtoul(f2 + 1, NULL, 10) == id) {
            snprintf(name, sizeof name, "%s", line);
            fclose(fh);
            return name;
        }
    }
    fclose(fh);
    return NULL;
}

static long parse_id(const char *text, const char *dbfile) {
    char *end;
    long id = strtol(text, &end, 10);
    if (*text != '\0' && *end == '\0')
        return id;
    return lookup_id(dbfile, text);
}

/* --- applets -------------------------------------------------------- */

static int app_chown(int argc, char **argv) {
    if (argc < 3) {
        fprintf(stderr, "chown: usage: chown OWNER[:GROUP] FILE...\n");
        return 1;
    }
    char spec[256];
    snprintf(spec, sizeof spec, "%s", argv[1]);
    char *colon = strchr(spec, ':');
    long uid = -1, gid = -1;
    if (colon != NULL) {
        *colon = '\0';
        if (colon[1] != '\0') {
            gid = parse_id(colon + 1, "/etc/group");
            if (gid < 0) {
                fprintf(stderr, "chown: invalid group: '%s'\n", colon + 1);
                return 1;
            }
        }
    }
    if (spec[0] != '\0') {
        uid = parse_id(spec, "/etc/passwd");
        if (uid < 0) {
            fprintf(stderr, "chown: invalid user: '%s'\n", spec);
            return 1;
        }
    }
    if (faked())
        return 0;
    int rc = 0;
    for (int i = 2; i < argc; i++) {
        if (chown(argv[i], (uid_t)uid, (gid_t)gid) != 0) {
            fprintf(stderr, "chown: changing ownership of '%s': %s\n",
                    argv[i], strerror(errno));
            rc = 1;
        }
    }
    return rc;
}

static int app_chmod(int argc, char **argv) {
    if (argc < 3) {
        fprintf(stderr, "chmod: usage: chmod OCTAL FILE...\n");
        return 1;
    }
    mode_t mode = (mode_t)strtoul(argv[1], NULL, 8);
    int rc = 0;
    for (int i = 2; i < argc; i++) {
        if (chmod(argv[i], mode) != 0) {
            fprintf(stderr, "chmod: %s: %s\n", argv[i], strerror(errno));
            rc = 1;
        }
    }
    return rc;
}

static int app_mknod(int argc, char **argv) {
    if (argc != 5) {
        fprintf(stderr, "mknod: usage: mknod NAME {c|b} MAJOR MINOR\n");
        return 1;
    }
    mode_t type;
    if (strcmp(argv[2], "c") == 0)
        type = S_IFCHR;
    else if (strcmp(argv[2], "b") == 0)
        type = S_IFBLK;
    else {
        fprintf(stderr, "mknod: bad type '%s'\n", argv[2]);
        return 1;
    }
    if (faked()) {
        /* the faked node still has to exist as a directory entry */
        int fd = open(argv[1], O_WRONLY | O_CREAT | O_EXCL, 0640);
        if (fd < 0) {
            fprintf(stderr, "mknod: %s: %s\n", argv[1], strerror(errno));
            return 1;
        }
        close(fd);
        return 0;
    }
    dev_t dev = makedev(strtoul(argv[3], NULL, 10),
                        strtoul(argv[4], NULL, 10));
    if (mknod(argv[1], type | 0640, dev) != 0) {
        fprintf(stderr, "mknod: %s: %s\n", argv[1], strerror(errno));
        return 1;
    }
    return 0;
}

static int app_touch(int argc, char **argv) {
    int rc = 0;
    for (int i = 1; i < argc; i++) {
        int fd = open(argv[i], O_WRONLY | O_CREAT | O_NOCTTY, 0666);
        if (fd < 0) {
            fprintf(stderr, "touch: %s: %s\n", argv[i], strerror(errno));
            rc = 1;
            continue;
        }
        futimens(fd, NULL);
        close(fd);
    }
    return rc;
}

static void mode_string(mode_t m, char *out) {
    out[0] = S_ISDIR(m) ? 'd' : S_ISCHR(m) ? 'c' : S_ISBLK(m) ? 'b'
           : S_ISLNK(m) ? 'l' : S_ISFIFO(m) ? 'p' : S_ISSOCK(m) ? 's' : '-';
    const char *bits = "rwxrwxrwx";
    for (int i = 0; i < 9; i++)
        out[i + 1] = (m & (0400 >> i)) ? bits[i] : '-';
    if (m & S_ISUID) out[3] = (m & 0100) ? 's' : 'S';
    if (m & S_ISGID) out[6] = (m & 0010) ? 's' : 'S';
    if (m & S_ISVTX) out[9] = (m & 0001) ? 't' : 'T';
    out[10] = '\0';
}

static int ls_one(const char *path, int longform) {
    struct stat st;
    if (lstat(path, &st) != 0) {
        fprintf(stderr, "ls: cannot access '%s': %s\n", path, strerror(errno));
        return 1;
    }
    if (!longform) {
        printf("%s\n", path);
        return 0;
    }
    char perms[16];
    mode_string(st.st_mode, perms);
    char ubuf[136], gbuf[136];
    const char *looked = lookup_name("/etc/passwd", st.st_uid);
    if (looked != NULL)
        snprintf(ubuf, sizeof ubuf, "%s", looked);
    else
        snprintf(ubuf, sizeof ubuf, "%u", st.st_uid);
    looked = lookup_name("/etc/group", st.st_gid);   /* static buffer reuse */
    if (looked != NULL)
        snprintf(gbuf, sizeof gbuf, "%s", looked);
    else
        snprintf(gbuf, sizeof gbuf, "%u", st.st_gid);
    char sizebuf[64];
    if (S_ISCHR(st.st_mode) || S_ISBLK(st.st_mode))
        snprintf(sizebuf, sizeof sizebuf, "%u, %u",
                 major(st.st_rdev), minor(st.st_rdev));
    else
        snprintf(sizebuf, sizeof sizebuf, "%lu",
                 (unsigned long)st.st_size);
    char when[32];
    struct tm tm;
    time_t mtime = st.st_mtime;
    localtime_r(&mtime, &tm);
    strftime(when, sizeof when, "%b %e %H:%M", &tm);
    printf("%s %lu %s %s %s %s %s\n", perms,
           (unsigned long)st.st_nlink, ubuf, gbuf, sizebuf, when, path);
    return 0;
}

static int app_ls(int argc, char **argv) {
    int longform = 0, first = 1, rc = 0;
    for (; first < argc && argv[first][0] == '-'; first++) {
        if (strchr(argv[first], 'l') != NULL)
            longform = 1;   /* -h is accepted and ignored: sizes are tiny */
    }
    if (first == argc) {
        DIR *dh = opendir(".");
        struct dirent *de;
        if (dh == NULL)
            return 1;
        while ((de = readdir(dh)) != NULL)
            if (de->d_name[0] != '.')
                rc |= ls_one(de->d_name, longform);
        closedir(dh);
        return rc;
    }
    for (int i = first; i < argc; i++)
        rc |= ls_one(argv[i], longform);
    return rc;
}

static int app_grep(int argc, char **argv, int fixed) {
    int quiet = 0, extended = 0, i = 1;
    for (; i < argc && argv[i][0] == '-'; i++) {
        if (strchr(argv[i], 'q') != NULL) quiet = 1;
        if (strchr(argv[i], 'E') != NULL) extended = 1;
        if (strchr(argv[i], 'F') != NULL) fixed = 1;
    }
    if (i >= argc) {
        fprintf(stderr, "grep: missing pattern\n");
        return 2;
    }
    const char *pattern = argv[i++];
    regex_t rx;
    if (!fixed && regcomp(&rx, pattern,
                          (extended ? REG_EXTENDED : 0) | REG_NOSUB) != 0) {
        fprintf(stderr, "grep: bad pattern '%s'\n", pattern);
        return 2;
    }
    int found = 0, error = 0;
    int nfiles = argc - i;
    char line[4096];
    do {
        FILE *fh = stdin;
        const char *name = "(standard input)";
        if (nfiles > 0) {
            name = argv[i];
            fh = fopen(name, "r");
            if (fh == NULL) {
                fprintf(stderr, "grep: %s: %s\n", name, strerror(errno));
                error = 1;
                i++;
                continue;
            }
        }
        while (fgets(line, sizeof line, fh) != NULL) {
            int hit = fixed ? strstr(line, pattern) != NULL
                            : regexec(&rx, line, 0, NULL, 0) == 0;
            if (hit) {
                found = 1;
                if (!quiet) {
                    if (nfiles > 1)
                        printf("%s:%s", name, line);
                    else
                        fputs(line, stdout);
                }
            }
        }
        if (fh != stdin)
            fclose(fh);
        i++;
    } while (i < argc);
    if (!fixed)
        regfree(&rx);
    if (error && !found)
        return 2;
    return found ? 0 : 1;
}

static int app_cat(int argc, char **argv) {
    char buf[8192];
    size_t n;
    if (argc == 1) {
        while ((n = fread(buf, 1, sizeof buf, stdin)) > 0)
            fwrite(buf, 1, n, stdout);
        return 0;
    }
    int rc = 0;
    for (int i = 1; i < argc; i++) {
        FILE *fh = fopen(argv[i], "r");
        if (fh == NULL) {
            fprintf(stderr, "cat: %s: %s\n", argv[i], strerror(errno));
            rc = 1;
            continue;
        }
        while ((n = fread(buf, 1, sizeof buf, fh)) > 0)
            fwrite(buf, 1, n, stdout);
        fclose(fh);
    }
    return rc;
}

static int app_id(int argc, char **argv) {
    if (argc > 1 && strcmp(argv[1], "-u") == 0)
        printf("%u\n", geteuid());
    else if (argc > 1 && strcmp(argv[1], "-g") == 0)
        printf("%u\n", getegid());
    else
        printf("uid=%u gid=%u\n", getuid(), getgid());
    return 0;
}

static int mkdir_p(const char *path) {
    char buf[PATH_MAX];
    snprintf(buf, sizeof buf, "%s", path);
    for (char *p = buf + 1; *p != '\0'; p++) {
        if (*p != '/')
            continue;
        *p = '\0';
        if (mkdir(buf, 0755) != 0 && errno != EEXIST)
            return -1;
        *p = '/';
    }
    if (mkdir(buf, 0755) != 0 && errno != EEXIST)
        return -1;
    return 0;
}

static int app_mkdir(int argc, char **argv) {
    int parents = 0, i = 1, rc = 0;
    if (i < argc && strcmp(argv[i], "-p") == 0) {
        parents = 1;
        i++;
    }
    for (; i < argc; i++) {
        int err = parents ? mkdir_p(argv[i]) : mkdir(argv[i], 0755);
        if (err != 0) {
            fprintf(stderr, "mkdir: %s: %s\n", argv[i], strerror(errno));
            rc = 1;
        }
    }
    return rc;
}

/* apt-style sandbox drop: the calls a package manager makes to shed
 * privilege, reported in apt's own error format when they fail. */
static int app_aptdrop(int argc, char **argv) {
    (void)argc; (void)argv;
    if (faked())
        return 0;
    int failed = 0;
    gid_t nogroup = 65534;
    if (setgroups(1, &nogroup) != 0) {
        printf("E: setgroups 65534 failed - setgroups (%d: %s)\n",
               errno, strerror(errno));
        failed = 1;
    }
    if (setresgid(65534, 65534, 65534) != 0) {
        printf("E: setegid 65534 failed - setegid (%d: %s)\n",
               errno, strerror(errno));
        failed = 1;
    }
    if (setresuid(100, 100, 100) != 0) {
        printf("E: seteuid 100 failed - seteuid (%d: %s)\n",
               errno, strerror(errno));
        failed = 1;
    }
    fflush(stdout);
    return failed ? 100 : 0;
}

/* sanity probe for sandbox tests: supplementary-group changes involving
 * unmapped IDs must be refused in an unprivileged namespace */
static int app_setgroups_check(int argc, char **argv) {
    (void)argc; (void)argv;
    gid_t unmapped = 65534;
    if (setgroups(1, &unmapped) == 0) {
        printf("setgroups-unmapped: allowed\n");
        return 1;
    }
    printf("setgroups-unmapped: refused (%d: %s)\n", errno, strerror(errno));
    return 0;
}

struct applet {
    const char *name;
    int (*run)(int, char **);
};

static int run_grep(int argc, char **argv) { return app_grep(argc, argv, 0); }
static int run_fgrep(int argc, char **argv) { return app_grep(argc, argv, 1); }

static const struct applet APPLETS[] = {
    {"chown", app_chown},
    {"chmod", app_chmod},
    {"mknod", app_mknod},
    {"touch", app_touch},
    {"ls", app_ls},
    {"grep", run_grep},
    {"fgrep", run_fgrep},
    {"cat", app_cat},
    {"id", app_id},
    {"mkdir", app_mkdir},
    {"aptdrop", app_aptdrop},
    {"setgroups-check", app_setgroups_check},
    {NULL, NULL},
};

int main(int argc, char **argv) {
    const char *name = strrchr(argv[0], '/');
    name = (name != NULL) ? name + 1 : argv[0];
    if (strcmp(name, "toolbox") == 0) {
        if (argc < 2) {
            fprintf(stderr, "toolbox: usage: toolbox APPLET [ARGS...]\n");
            return 2;
        }
        argc--;
        argv++;
        name = argv[0];
    }
    for (const struct applet *a = APPLETS; a->name != NULL; a++)
        if (strcmp(a->name, name) == 0)
            return a->run(argc, argv);
    fprintf(stderr, "toolbox: unknown applet '%s'\n", name);
    return 127;
}
