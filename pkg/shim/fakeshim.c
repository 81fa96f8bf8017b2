/* fakeshim: preload interposition for apparently-privileged builds.
 *
 * Loaded via LD_PRELOAD into every process of a sandboxed build step. The
 * wrapped process appears to be root: identity queries return 0, identity
 * changes succeed, and ownership/mode/device-node mutations are recorded
 * in the builder's ownership database instead of hitting the kernel.
 * Metadata queries really run, then have their results rewritten from the
 * database so the lies stay consistent.
 *
 * The database endpoint is a unix socket named by NSBUILD_DB_SOCK. Frames
 * are little-endian: u32 length, u8 type {1 GET, 2 SET, 3 UNLINK,
 * 4 MKNOD}, u64 device, u64 inode, and for SET/MKNOD u32 uid, u32 gid,
 * u32 mode, u8 kind, u64 rdev. Responses are u8 status {0 absent,
 * 1 present, 2 ok, 255 malformed}, with the record fields after status 1.
 *
 * If the database is configured but unreachable, calls that need it fail
 * with EIO rather than lying without persistence; a build that loses its
 * lies would export a corrupt image. Statically linked programs cannot be
 * wrapped at all; that is inherent to the preload approach.
 */

#define _GNU_SOURCE
#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <grp.h>
#include <pthread.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/sysmacros.h>
#include <sys/types.h>
#include <sys/un.h>
#include <unistd.h>

#define ENDPOINT_ENV "NSBUILD_DB_SOCK"

#define MSG_GET 1
#define MSG_SET 2
#define MSG_UNLINK 3
#define MSG_MKNOD 4

#define ST_ABSENT 0
#define ST_PRESENT 1
#define ST_OK 2

#define KIND_REG 0
#define KIND_DIR 1
#define KIND_LNK 2
#define KIND_CHR 3
#define KIND_BLK 4
#define KIND_FIFO 5
#define KIND_SOCK 6

struct record {
    uint32_t uid;
    uint32_t gid;
    uint32_t mode;
    uint8_t kind;
    uint64_t rdev;
};

/* --- real libc entry points ----------------------------------------- */

#define REAL(name) \
    static __typeof__(name) *real_##name; \
    static __typeof__(name) *get_##name(void) { \
        if (real_##name == NULL) \
            real_##name = (__typeof__(name) *)dlsym(RTLD_NEXT, #name); \
        return real_##name; \
    }

REAL(stat)
REAL(lstat)
REAL(fstat)
REAL(fstatat)
REAL(statx)
REAL(chmod)
REAL(fchmod)
REAL(fchmodat)
REAL(mknod)
REAL(mknodat)
REAL(unlink)
REAL(unlinkat)
REAL(rmdir)

/* --- database client -------------------------------------------------*/

static pthread_mutex_t db_lock = PTHREAD_MUTEX_INITIALIZER;
static int db_fd = -1;
static pid_t db_owner;
static int warned;

static void warn_once(const char *what) {
    if (!warned) {
        warned = 1;
        fprintf(stderr, "fakeshim: %s; failing privileged emulation\n", what);
    }
}

/* caller holds db_lock */
static int db_connect(void) {
    const char *path = getenv(ENDPOINT_ENV);
    struct sockaddr_un addr;
    int fd;

    if (db_fd >= 0 && db_owner == getpid())
        return db_fd;
    if (db_fd >= 0)
        close(db_fd);            /* stale fd inherited across fork */
    db_fd = -1;
    if (path == NULL || strlen(path) >= sizeof(addr.sun_path)) {
        warn_once("ownership database endpoint not configured");
        return -1;
    }
    fd = socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0)
        return -1;
    memset(&addr, 0, sizeof addr);
    addr.sun_family = AF_UNIX;
    strcpy(addr.sun_path, path);
    if (connect(fd, (struct sockaddr *)&addr, sizeof addr) != 0) {
        warn_once("cannot reach ownership database");
        close(fd);
        return -1;
    }
    db_fd = fd;
    db_owner = getpid();
    return db_fd;
}

static int io_exact(int fd, void *buf, size_t n, int writing) {
    char *p = buf;
    while (n > 0) {
        /* MSG_NOSIGNAL: a dying database must not SIGPIPE the build */
        ssize_t got = writing ? send(fd, p, n, MSG_NOSIGNAL)
                              : recv(fd, p, n, 0);
        if (got <= 0) {
            if (got < 0 && errno == EINTR)
                continue;
            return -1;
        }
        p += got;
        n -= (size_t)got;
    }
    return 0;
}

static void put_u32(uint8_t *p, uint32_t v) {
    p[0] = v; p[1] = v >> 8; p[2] = v >> 16; p[3] = v >> 24;
}

static void put_u64(uint8_t *p, uint64_t v) {
    for (int i = 0; i < 8; i++)
        p[i] = (uint8_t)(v >> (8 * i));
}

static uint32_t get_u32(const uint8_t *p) {
    return (uint32_t)p[0] | (uint32_t)p[1] << 8 | (uint32_t)p[2] << 16
         | (uint32_t)p[3] << 24;
}

static uint64_t get_u64(const uint8_t *p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; i--)
        v = v << 8 | p[i];
    return v;
}

/* request: returns response status, fills rec on ST_PRESENT, -1 on error */
static int db_request(uint8_t type, uint64_t dev, uint64_t ino,
                      const struct record *send_rec, struct record *out_rec) {
    uint8_t frame[4 + 38];
    uint8_t reply[1 + 21];          /* status + uid,gid,mode u32, kind u8, rdev u64 */
    size_t body = 17;
    int fd, status;

    frame[4] = type;
    put_u64(frame + 5, dev);
    put_u64(frame + 13, ino);
    if (send_rec != NULL) {
        put_u32(frame + 21, send_rec->uid);
        put_u32(frame + 25, send_rec->gid);
        put_u32(frame + 29, send_rec->mode);
        frame[33] = send_rec->kind;
        put_u64(frame + 34, send_rec->rdev);
        body = 38;
    }
    put_u32(frame, (uint32_t)body);

    pthread_mutex_lock(&db_lock);
    fd = db_connect();
    if (fd < 0 || io_exact(fd, frame, 4 + body, 1) != 0
            || io_exact(fd, reply, 1, 0) != 0) {
        if (db_fd >= 0) {
            close(db_fd);
            db_fd = -1;
        }
        pthread_mutex_unlock(&db_lock);
        return -1;
    }
    status = reply[0];
    if (status == ST_PRESENT) {
        if (io_exact(fd, reply + 1, 21, 0) != 0) {
            close(db_fd);
            db_fd = -1;
            pthread_mutex_unlock(&db_lock);
            return -1;
        }
        if (out_rec != NULL) {
            out_rec->uid = get_u32(reply + 1);
            out_rec->gid = get_u32(reply + 5);
            out_rec->mode = get_u32(reply + 9);
            out_rec->kind = reply[13];
            out_rec->rdev = get_u64(reply + 14);
        }
    }
    pthread_mutex_unlock(&db_lock);
    return status;
}

static int fail_io(void) {
    errno = EIO;
    return -1;
}

/* --- record helpers -------------------------------------------------- */

static uint8_t kind_of_mode(mode_t m) {
    if (S_ISDIR(m)) return KIND_DIR;
    if (S_ISLNK(m)) return KIND_LNK;
    if (S_ISCHR(m)) return KIND_CHR;
    if (S_ISBLK(m)) return KIND_BLK;
    if (S_ISFIFO(m)) return KIND_FIFO;
    if (S_ISSOCK(m)) return KIND_SOCK;
    return KIND_REG;
}

static mode_t ifmt_of_kind(uint8_t kind) {
    switch (kind) {
    case KIND_DIR: return S_IFDIR;
    case KIND_LNK: return S_IFLNK;
    case KIND_CHR: return S_IFCHR;
    case KIND_BLK: return S_IFBLK;
    case KIND_FIFO: return S_IFIFO;
    case KIND_SOCK: return S_IFSOCK;
    default: return S_IFREG;
    }
}

static void default_record(struct record *rec, const struct stat *st) {
    rec->uid = 0;
    rec->gid = 0;
    rec->mode = st->st_mode & 07777;
    rec->kind = kind_of_mode(st->st_mode);
    rec->rdev = (rec->kind == KIND_CHR || rec->kind == KIND_BLK)
        ? (uint64_t)st->st_rdev : 0;
}

/* merge a chown/chmod request over the existing record (or a default) */
static int update_record(const struct stat *st, int64_t uid, int64_t gid,
                         int64_t mode) {
    struct record rec;
    int status;
    if (uid == -1 && gid == -1 && mode == -1)
        return 0;               /* no-op chown: nothing worth recording */
    status = db_request(MSG_GET, st->st_dev, st->st_ino, NULL, &rec);
    if (status < 0)
        return fail_io();
    if (status != ST_PRESENT)
        default_record(&rec, st);
    if (uid != -1)
        rec.uid = (uint32_t)uid;
    if (gid != -1)
        rec.gid = (uint32_t)gid;
    if (mode != -1)
        rec.mode = (uint32_t)mode & 07777;
    if (db_request(MSG_SET, st->st_dev, st->st_ino, &rec, NULL) != ST_OK)
        return fail_io();
    return 0;
}

static void rewrite_stat_result(struct stat *st) {
    struct record rec;
    int status = db_request(MSG_GET, st->st_dev, st->st_ino, NULL, &rec);
    if (status == ST_PRESENT) {
        st->st_uid = rec.uid;
        st->st_gid = rec.gid;
        st->st_mode = ifmt_of_kind(rec.kind) | (rec.mode & 07777);
        if (rec.kind == KIND_CHR || rec.kind == KIND_BLK)
            st->st_rdev = (dev_t)rec.rdev;
    } else {
        /* everything unrecorded appears root-owned in this context; a
         * DB outage degrades queries to that default rather than
         * failing every shell PATH lookup */
        st->st_uid = 0;
        st->st_gid = 0;
    }
}

/* --- identity: the defining lie -------------------------------------- */

uid_t getuid(void) { return 0; }
uid_t geteuid(void) { return 0; }
gid_t getgid(void) { return 0; }
gid_t getegid(void) { return 0; }

int getresuid(uid_t *r, uid_t *e, uid_t *s) { *r = *e = *s = 0; return 0; }
int getresgid(gid_t *r, gid_t *e, gid_t *s) { *r = *e = *s = 0; return 0; }

int setuid(uid_t u) { (void)u; return 0; }
int setgid(gid_t g) { (void)g; return 0; }
int seteuid(uid_t u) { (void)u; return 0; }
int setegid(gid_t g) { (void)g; return 0; }
int setreuid(uid_t r, uid_t e) { (void)r; (void)e; return 0; }
int setregid(gid_t r, gid_t e) { (void)r; (void)e; return 0; }
int setresuid(uid_t r, uid_t e, uid_t s) { (void)r; (void)e; (void)s; return 0; }
int setresgid(gid_t r, gid_t e, gid_t s) { (void)r; (void)e; (void)s; return 0; }
int setgroups(size_t n, const gid_t *list) { (void)n; (void)list; return 0; }

int getgroups(int size, gid_t list[]) {
    if (size == 0)
        return 1;
    if (size < 1) {
        errno = EINVAL;
        return -1;
    }
    list[0] = 0;
    return 1;
}

/* --- ownership ------------------------------------------------------- */

int chown(const char *path, uid_t uid, gid_t gid) {
    struct stat st;
    if (get_stat()(path, &st) != 0)
        return -1;
    return update_record(&st, uid == (uid_t)-1 ? -1 : (int64_t)uid,
                         gid == (gid_t)-1 ? -1 : (int64_t)gid, -1);
}

int lchown(const char *path, uid_t uid, gid_t gid) {
    struct stat st;
    if (get_lstat()(path, &st) != 0)
        return -1;
    return update_record(&st, uid == (uid_t)-1 ? -1 : (int64_t)uid,
                         gid == (gid_t)-1 ? -1 : (int64_t)gid, -1);
}

int fchown(int fd, uid_t uid, gid_t gid) {
    struct stat st;
    if (get_fstat()(fd, &st) != 0)
        return -1;
    return update_record(&st, uid == (uid_t)-1 ? -1 : (int64_t)uid,
                         gid == (gid_t)-1 ? -1 : (int64_t)gid, -1);
}

int fchownat(int dirfd, const char *path, uid_t uid, gid_t gid, int flags) {
    struct stat st;
    if (get_fstatat()(dirfd, path, &st, flags & AT_SYMLINK_NOFOLLOW) != 0)
        return -1;
    return update_record(&st, uid == (uid_t)-1 ? -1 : (int64_t)uid,
                         gid == (gid_t)-1 ? -1 : (int64_t)gid, -1);
}

/* --- mode ------------------------------------------------------------ */

int chmod(const char *path, mode_t mode) {
    struct stat st;
    if (get_stat()(path, &st) != 0)
        return -1;
    (void)!get_chmod()(path, mode);  /* best effort on the real fs */
    return update_record(&st, -1, -1, (int64_t)(mode & 07777));
}

int fchmod(int fd, mode_t mode) {
    struct stat st;
    if (get_fstat()(fd, &st) != 0)
        return -1;
    (void)!get_fchmod()(fd, mode);
    return update_record(&st, -1, -1, (int64_t)(mode & 07777));
}

int fchmodat(int dirfd, const char *path, mode_t mode, int flags) {
    struct stat st;
    if (get_fstatat()(dirfd, path, &st, flags & AT_SYMLINK_NOFOLLOW) != 0)
        return -1;
    (void)!get_fchmodat()(dirfd, path, mode, 0);
    return update_record(&st, -1, -1, (int64_t)(mode & 07777));
}

/* --- device nodes ------------------------------------------------------
 * A faked device has to exist as a directory entry, so an empty placeholder
 * file is created and the device identity lives only in the database;
 * export materializes it as a real archive entry. */

static int fake_mknodat(int dirfd, const char *path, mode_t mode, dev_t dev) {
    struct record rec;
    struct stat st;
    int fd = openat(dirfd, path, O_WRONLY | O_CREAT | O_EXCL, mode & 0777);
    if (fd < 0)
        return -1;
    if (get_fstat()(fd, &st) != 0) {
        close(fd);
        return -1;
    }
    close(fd);
    rec.uid = 0;
    rec.gid = 0;
    rec.mode = mode & 07777;
    rec.kind = S_ISCHR(mode) ? KIND_CHR : KIND_BLK;
    rec.rdev = (uint64_t)dev;
    if (db_request(MSG_MKNOD, st.st_dev, st.st_ino, &rec, NULL) != ST_OK)
        return fail_io();
    return 0;
}

int mknod(const char *path, mode_t mode, dev_t dev) {
    if (S_ISCHR(mode) || S_ISBLK(mode))
        return fake_mknodat(AT_FDCWD, path, mode, dev);
    return get_mknod()(path, mode, dev);
}

int mknodat(int dirfd, const char *path, mode_t mode, dev_t dev) {
    if (S_ISCHR(mode) || S_ISBLK(mode))
        return fake_mknodat(dirfd, path, mode, dev);
    return get_mknodat()(dirfd, path, mode, dev);
}

/* --- metadata queries: really made, then adjusted --------------------- */

int stat(const char *path, struct stat *st) {
    if (get_stat()(path, st) != 0)
        return -1;
    rewrite_stat_result(st);
    return 0;
}

int lstat(const char *path, struct stat *st) {
    if (get_lstat()(path, st) != 0)
        return -1;
    rewrite_stat_result(st);
    return 0;
}

int fstat(int fd, struct stat *st) {
    if (get_fstat()(fd, st) != 0)
        return -1;
    rewrite_stat_result(st);
    return 0;
}

int fstatat(int dirfd, const char *path, struct stat *st, int flags) {
    if (get_fstatat()(dirfd, path, st, flags) != 0)
        return -1;
    rewrite_stat_result(st);
    return 0;
}

/* 64-bit aliases share the x86-64 layout */
int stat64(const char *path, struct stat64 *st) {
    return stat(path, (struct stat *)st);
}

int lstat64(const char *path, struct stat64 *st) {
    return lstat(path, (struct stat *)st);
}

int fstat64(int fd, struct stat64 *st) {
    return fstat(fd, (struct stat *)st);
}

int fstatat64(int dirfd, const char *path, struct stat64 *st, int flags) {
    return fstatat(dirfd, path, (struct stat *)st, flags);
}

int statx(int dirfd, const char *path, int flags, unsigned int mask,
          struct statx *stx) {
    struct record rec;
    int status;
    if (get_statx() == NULL) {
        errno = ENOSYS;
        return -1;
    }
    if (get_statx()(dirfd, path, flags, mask, stx) != 0)
        return -1;
    status = db_request(MSG_GET,
                        makedev(stx->stx_dev_major, stx->stx_dev_minor),
                        stx->stx_ino, NULL, &rec);
    if (status == ST_PRESENT) {
        stx->stx_uid = rec.uid;
        stx->stx_gid = rec.gid;
        stx->stx_mode = (uint16_t)(ifmt_of_kind(rec.kind) | (rec.mode & 07777));
        if (rec.kind == KIND_CHR || rec.kind == KIND_BLK) {
            stx->stx_rdev_major = major((dev_t)rec.rdev);
            stx->stx_rdev_minor = minor((dev_t)rec.rdev);
        }
    } else {
        stx->stx_uid = 0;
        stx->stx_gid = 0;
    }
    return 0;
}

/* --- deletions: records must not outlive their inode ------------------ */

int unlink(const char *path) {
    struct stat st;
    int had = get_lstat()(path, &st) == 0;
    int rc = get_unlink()(path);
    if (rc == 0 && had)
        db_request(MSG_UNLINK, st.st_dev, st.st_ino, NULL, NULL);
    return rc;
}

int unlinkat(int dirfd, const char *path, int flags) {
    struct stat st;
    int had = get_fstatat()(dirfd, path, &st, AT_SYMLINK_NOFOLLOW) == 0;
    int rc = get_unlinkat()(dirfd, path, flags);
    if (rc == 0 && had)
        db_request(MSG_UNLINK, st.st_dev, st.st_ino, NULL, NULL);
    return rc;
}

int rmdir(const char *path) {
    struct stat st;
    int had = get_lstat()(path, &st) == 0;
    int rc = get_rmdir()(path);
    if (rc == 0 && had)
        db_request(MSG_UNLINK, st.st_dev, st.st_ino, NULL, NULL);
    return rc;
}
