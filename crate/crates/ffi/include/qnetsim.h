#ifndef QNETSIM_H
#define QNETSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum QnsStatus {
  QNS_STATUS_OK = 0,
  QNS_STATUS_NULL_POINTER = 1,
  QNS_STATUS_INVALID_ARGUMENT = 2,
  QNS_STATUS_CAPACITY = 3,
  QNS_STATUS_BUFFER_TOO_SMALL = 4,
  QNS_STATUS_CODEC = 5,
  QNS_STATUS_IO = 6,
  /**
   * The CQC server answered with an error; see `qns_last_reply_type`.
   */
  QNS_STATUS_SERVER = 7,
  QNS_STATUS_PANIC = 8,
} QnsStatus;

/**
 * A connection to one node's CQC server.
 */
typedef struct QnsClient QnsClient;

/**
 * A state-vector register with its own measurement randomness.
 */
typedef struct QnsRegister QnsRegister;

/**
 * Fields of a single CQC command. `has_extra` forces the extra header even
 * when the instruction does not need it.
 */
typedef struct QnsCommand {
  uint16_t qubit_id;
  uint8_t instruction;
  uint8_t options;
  bool has_extra;
  uint16_t extra_qubit_id;
  uint16_t remote_app_id;
  /**
   * IPv4 address as a host-order integer.
   */
  uint32_t remote_node;
  uint16_t remote_port;
  uint8_t step;
} QnsCommand;

/**
 * A decoded reply. Only the fields implied by `msg_type` are meaningful.
 */
typedef struct QnsReply {
  uint8_t msg_type;
  uint16_t app_id;
  uint16_t qubit_id;
  uint8_t outcome;
  uint64_t time;
  uint32_t ent_node_a;
  uint32_t ent_node_b;
  uint32_t ent_sequence;
  uint64_t ent_created_at;
  uint16_t max_qubits;
} QnsReply;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread.
 */
size_t qns_last_error_length(void);

/**
 * Copies the last error message, NUL-terminated, into `buf`.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes.
 */
enum QnsStatus qns_last_error_message(char *buf, size_t cap);

/**
 * CQC message type of the last server error seen on this thread.
 */
uint8_t qns_last_reply_type(void);

/**
 * Creates a register of `num_qubits` qubits in |0...0>, capped at `max_qubits`.
 *
 * # Safety
 * `out_reg` must be a valid pointer.
 */
enum QnsStatus qns_register_new(size_t num_qubits,
                                size_t max_qubits,
                                uint64_t seed,
                                struct QnsRegister **out_reg);

/**
 * # Safety
 * `reg` must come from `qns_register_new` and not be used afterwards.
 */
void qns_register_free(struct QnsRegister *reg);

/**
 * Number of qubits, or 0 for a null handle.
 *
 * # Safety
 * `reg` must be null or a live handle.
 */
size_t qns_register_num_qubits(const struct QnsRegister *reg);

/**
 * Applies a single-qubit gate given by its CQC instruction code.
 *
 * # Safety
 * `reg` must be a live handle.
 */
enum QnsStatus qns_register_apply_gate(struct QnsRegister *reg,
                                       size_t pos,
                                       uint8_t code,
                                       uint8_t step);

/**
 * Applies CNOT (20) or CPHASE (21).
 *
 * # Safety
 * `reg` must be a live handle.
 */
enum QnsStatus qns_register_apply_two(struct QnsRegister *reg,
                                      size_t control,
                                      size_t target,
                                      uint8_t code);

/**
 * Measures qubit `pos`; a demolition measurement removes it.
 *
 * # Safety
 * `reg` and `out_bit` must be valid pointers.
 */
enum QnsStatus qns_register_measure(struct QnsRegister *reg,
                                    size_t pos,
                                    bool demolition,
                                    uint8_t *out_bit);

/**
 * Copies the 2^n amplitudes into `re` and `im`, index 0 being |0...0> with
 * qubit 0 as the most significant bit.
 *
 * # Safety
 * `re` and `im` must be valid for `len` doubles.
 */
enum QnsStatus qns_register_amplitudes(const struct QnsRegister *reg,
                                       double *re,
                                       double *im,
                                       size_t len);

/**
 * Encodes a COMMAND message holding one command. `out_len` receives the
 * full message length even when `buf` is too small.
 *
 * # Safety
 * `cmd` and `out_len` must be valid; `buf` must be valid for `cap` bytes.
 */
enum QnsStatus qns_cqc_encode_command(uint16_t app_id,
                                      const struct QnsCommand *cmd,
                                      uint8_t *buf,
                                      size_t cap,
                                      size_t *out_len);

/**
 * Decodes one complete reply message.
 *
 * # Safety
 * `bytes` must be valid for `len` bytes and `out_reply` must be valid.
 */
enum QnsStatus qns_cqc_decode_reply(const uint8_t *bytes, size_t len, struct QnsReply *out_reply);

/**
 * Connects to node `node` of the network described by the config file at
 * `config_path`, as application `app_id`.
 *
 * # Safety
 * Strings must be NUL-terminated; `out_client` must be valid.
 */
enum QnsStatus qns_client_connect(const char *config_path,
                                  const char *node,
                                  uint16_t app_id,
                                  struct QnsClient **out_client);

/**
 * # Safety
 * `client` must come from `qns_client_connect` and not be used afterwards.
 */
void qns_client_free(struct QnsClient *client);

/**
 * # Safety
 * `client` must be a live handle; `out_id` may be null.
 */
enum QnsStatus qns_client_new_qubit(struct QnsClient *client, uint16_t *out_id);

/**
 * Applies a single-qubit gate by CQC instruction code.
 *
 * # Safety
 * `client` must be a live handle.
 */
enum QnsStatus qns_client_gate(struct QnsClient *client,
                               uint16_t qubit,
                               uint8_t instruction,
                               uint8_t step);

/**
 * Applies CNOT (20) or CPHASE (21).
 *
 * # Safety
 * `client` must be a live handle.
 */
enum QnsStatus qns_client_two(struct QnsClient *client,
                              uint8_t instruction,
                              uint16_t control,
                              uint16_t target);

/**
 * # Safety
 * `client` must be a live handle; `out_bit` may be null.
 */
enum QnsStatus qns_client_measure(struct QnsClient *client,
                                  uint16_t qubit,
                                  bool inplace,
                                  uint8_t *out_bit);

/**
 * # Safety
 * `client` must be a live handle.
 */
enum QnsStatus qns_client_release(struct QnsClient *client, uint16_t qubit);

/**
 * Sends a qubit to application `remote_app` on node `node`.
 *
 * # Safety
 * `client` must be a live handle and `node` NUL-terminated.
 */
enum QnsStatus qns_client_send(struct QnsClient *client,
                               uint16_t qubit,
                               const char *node,
                               uint16_t remote_app);

/**
 * Waits for a qubit sent to this application.
 *
 * # Safety
 * `client` must be a live handle; `out_id` may be null.
 */
enum QnsStatus qns_client_recv(struct QnsClient *client, uint16_t *out_id);

/**
 * Creates an EPR pair with application `remote_app` on node `node`.
 *
 * # Safety
 * `client` must be a live handle and `node` NUL-terminated; outputs may be null.
 */
enum QnsStatus qns_client_create_epr(struct QnsClient *client,
                                     const char *node,
                                     uint16_t remote_app,
                                     struct QnsReply *out_reply);

/**
 * Waits for the other half of an EPR pair.
 *
 * # Safety
 * `client` must be a live handle; `out_reply` may be null.
 */
enum QnsStatus qns_client_recv_epr(struct QnsClient *client, struct QnsReply *out_reply);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QNETSIM_H */
