#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "rp2/nn.hpp"
#include "rp2/oracle.hpp"

// Newline-delimited JSON oracle protocol.
//
//   server -> client, once: {"protocol":"rp2-oracle/1","mode":"soft"|"hard",
//                            "num_classes":K,"height":32,"width":32}
//   client -> server:       {"id":<int>,"image":"<base64 of H*W*3 bytes, RGB interleaved>"}
//   server -> client:       {"id":<int>,"probs":[...]}   (soft)
//                           {"id":<int>,"label":<int>}   (hard)
//                           {"id":<int>|null,"error":"..."}
namespace rp2::wire {

inline constexpr const char* kProtocol = "rp2-oracle/1";

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
// Throws InputError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

// Planar [0,1] image column <-> base64 of interleaved 8-bit RGB.
std::string encode_image(const Eigen::Ref<const Eigen::VectorXf>& planar, int height, int width);
Eigen::VectorXf decode_image(std::string_view text, int height, int width);

// Transport-free server core: one response line per request line, in order.
// Hard mode computes labels from logits and never forms probabilities.
class OracleService {
 public:
  OracleService(const Model<float>& model, AccessLevel mode);
  std::string handshake() const;
  std::vector<std::string> answer(const std::vector<std::string>& requests) const;
  AccessLevel mode() const { return mode_; }

 private:
  const Model<float>& model_;
  AccessLevel mode_;
};

// Serves stdin/stdout until end of input.
void serve_stdio(const OracleService& service, std::size_t max_batch = 512);

// Unix-domain socket server; one thread per connection.
class UnixServer {
 public:
  UnixServer(const OracleService& service, std::filesystem::path socket_path, std::size_t max_batch = 512);
  ~UnixServer();
  UnixServer(const UnixServer&) = delete;
  UnixServer& operator=(const UnixServer&) = delete;

  // Blocks until stop() is called.
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Client side of one connection. Endpoints: "unix:<path>" or
// "stdio:<command line>" (the command is spawned and spoken to over pipes).
class Connection {
 public:
  static std::unique_ptr<Connection> open(const std::string& endpoint);
  virtual ~Connection() = default;

  AccessLevel mode() const { return mode_; }
  int num_classes() const { return num_classes_; }
  int height() const { return height_; }
  int width() const { return width_; }

  struct Answers {
    std::vector<int> labels;
    Eigen::MatrixXf probs;  // num_classes x B in soft mode, empty in hard mode
  };

  // Sends one request per column (pipelined from a writer thread) and
  // returns the answers ordered like the columns. Any error response,
  // missing or duplicate id raises OracleError.
  Answers query(const ImageBatch& batch);

 protected:
  void read_handshake();
  virtual void write_all(const std::string& data) = 0;
  virtual bool read_line(std::string& line) = 0;

 private:
  AccessLevel mode_ = AccessLevel::Hard;
  int num_classes_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::int64_t next_id_ = 0;
};

class RemoteLabelOracle final : public LabelOracle {
 public:
  explicit RemoteLabelOracle(std::unique_ptr<Connection> connection);
  std::vector<int> labels(const ImageBatch& batch) override;
  int num_classes() const override { return connection_->num_classes(); }

 private:
  std::unique_ptr<Connection> connection_;
};

// Requires a soft-mode server.
class RemoteProbabilityOracle final : public ProbabilityOracle {
 public:
  explicit RemoteProbabilityOracle(std::unique_ptr<Connection> connection);
  Eigen::MatrixXf probabilities(const ImageBatch& batch) override;
  int num_classes() const override { return connection_->num_classes(); }

 private:
  std::unique_ptr<Connection> connection_;
};

}  // namespace rp2::wire
