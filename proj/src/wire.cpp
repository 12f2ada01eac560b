#include "rp2/wire.hpp"

#include <boost/asio.hpp>
#include <boost/process.hpp>
#include <openssl/evp.h>

#include <condition_variable>
#include <csignal>
#include <deque>
#include <cmath>
#include <exception>
#include <istream>
#include <list>
#include <mutex>
#include <thread>
#include <unistd.h>

#include "json.hpp"
#include "rp2/errors.hpp"

namespace rp2::wire {

namespace asio = boost::asio;
using local = asio::local::stream_protocol;
using nlohmann::json;

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw InputError("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * (text.size() / 4));
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw InputError("base64: invalid character");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

std::string encode_image(const Eigen::Ref<const Eigen::VectorXf>& planar, int height, int width) {
  const Eigen::Index n = Eigen::Index(height) * width;
  if (planar.size() != 3 * n) throw DimensionError("encode_image: size does not match height*width*3");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(3 * n));
  for (Eigen::Index p = 0; p < n; ++p)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(planar[c * n + p], 0.0f, 1.0f);
      bytes[static_cast<std::size_t>(3 * p + c)] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return base64_encode(bytes);
}

Eigen::VectorXf decode_image(std::string_view text, int height, int width) {
  const auto bytes = base64_decode(text);
  const Eigen::Index n = Eigen::Index(height) * width;
  if (static_cast<Eigen::Index>(bytes.size()) != 3 * n)
    throw InputError("image has " + std::to_string(bytes.size()) + " bytes, expected " +
                     std::to_string(3 * n));
  Eigen::VectorXf planar(3 * n);
  for (Eigen::Index p = 0; p < n; ++p)
    for (int c = 0; c < 3; ++c) planar[c * n + p] = bytes[static_cast<std::size_t>(3 * p + c)] / 255.0f;
  return planar;
}

// ---------------------------------------------------------------- server

OracleService::OracleService(const Model<float>& model, AccessLevel mode) : model_(model), mode_(mode) {
  if (mode == AccessLevel::White) throw ParameterError("oracle server: mode must be soft or hard");
  if (model.arch.input.channels != 3) throw ParameterError("oracle server: model must take RGB input");
}

std::string OracleService::handshake() const {
  json h;
  h["protocol"] = kProtocol;
  h["mode"] = to_string(mode_);
  h["num_classes"] = model_.num_classes();
  h["height"] = model_.arch.input.height;
  h["width"] = model_.arch.input.width;
  return h.dump();
}

std::vector<std::string> OracleService::answer(const std::vector<std::string>& requests) const {
  const int h = model_.arch.input.height, w = model_.arch.input.width;
  std::vector<std::string> out(requests.size());
  std::vector<std::size_t> slots;
  std::vector<std::int64_t> ids;
  std::vector<Eigen::VectorXf> images;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const json req = json::parse(requests[i], nullptr, false);
    json id = nullptr;
    if (req.is_object() && req.contains("id") && req["id"].is_number_integer()) id = req["id"];
    const auto fail = [&](const std::string& msg) { out[i] = json{{"id", id}, {"error", msg}}.dump(); };
    if (req.is_discarded()) { fail("malformed JSON"); continue; }
    if (!req.is_object()) { fail("request must be a JSON object"); continue; }
    if (id.is_null()) { fail("missing integer id"); continue; }
    if (!req.contains("image") || !req["image"].is_string()) { fail("missing image string"); continue; }
    try {
      images.push_back(decode_image(req["image"].get_ref<const std::string&>(), h, w));
    } catch (const InputError& e) {
      fail(e.what());
      continue;
    }
    slots.push_back(i);
    ids.push_back(id.get<std::int64_t>());
  }
  if (images.empty()) return out;
  ImageBatch batch(images.front().size(), static_cast<Eigen::Index>(images.size()));
  for (std::size_t k = 0; k < images.size(); ++k) batch.col(static_cast<Eigen::Index>(k)) = images[k];
  if (mode_ == AccessLevel::Hard) {
    const auto labels = predict(model_, batch);
    for (std::size_t k = 0; k < slots.size(); ++k)
      out[slots[k]] = json{{"id", ids[k]}, {"label", labels[k]}}.dump();
  } else {
    const Eigen::MatrixXf probs = forward(model_, batch);
    for (std::size_t k = 0; k < slots.size(); ++k) {
      const auto col = probs.col(static_cast<Eigen::Index>(k));
      out[slots[k]] = json{{"id", ids[k]}, {"probs", std::vector<float>(col.data(), col.data() + col.size())}}.dump();
    }
  }
  return out;
}

namespace {

std::size_t available(local::socket& s) { return s.available(); }

std::size_t available(asio::posix::stream_descriptor& d) {
  asio::posix::descriptor_base::bytes_readable command(true);
  d.io_control(command);
  return command.get();
}

// Replies are handed to a writer thread so the session keeps reading while
// a slow client lets its receive buffer fill up.
class ReplyWriter {
 public:
  explicit ReplyWriter(asio::posix::stream_descriptor& out) : out_(out), thread_([this] { loop(); }) {}
  ~ReplyWriter() {
    {
      std::lock_guard lock(mutex_);
      done_ = true;
    }
    ready_.notify_one();
    thread_.join();
  }
  void push(std::string data) {
    {
      std::lock_guard lock(mutex_);
      queue_.push_back(std::move(data));
    }
    ready_.notify_one();
  }
  bool failed() const { return failed_; }

 private:
  void loop() {
    for (;;) {
      std::string data;
      {
        std::unique_lock lock(mutex_);
        ready_.wait(lock, [this] { return done_ || !queue_.empty(); });
        if (queue_.empty()) return;
        data = std::move(queue_.front());
        queue_.pop_front();
      }
      boost::system::error_code ec;
      asio::write(out_, asio::buffer(data), ec);
      if (ec) {
        failed_ = true;
        return;
      }
    }
  }

  asio::posix::stream_descriptor& out_;
  std::mutex mutex_;
  std::condition_variable ready_;
  std::deque<std::string> queue_;
  bool done_ = false;
  std::atomic<bool> failed_ = false;
  std::thread thread_;
};

// Reads whatever lines are already buffered or available (at least one,
// blocking) and answers them as one batch, until the peer closes its side.
template <typename In>
void run_session(In& in, asio::posix::stream_descriptor& out, const OracleService& service,
                 std::size_t max_batch) {
  asio::write(out, asio::buffer(service.handshake() + "\n"));
  ReplyWriter writer(out);
  asio::streambuf buf;
  std::istream stream(&buf);
  std::vector<std::string> lines;
  for (;;) {
    boost::system::error_code ec;
    asio::read_until(in, buf, '\n', ec);
    const bool eof = static_cast<bool>(ec);
    if (!eof) {
      while (available(in) > 0) {
        const std::size_t n = asio::read(in, buf.prepare(available(in)), ec);
        buf.commit(n);
        if (ec) break;
      }
    }
    lines.clear();
    std::string line;
    while (lines.size() < max_batch && std::getline(stream, line)) {
      if (stream.eof() && !eof) {
        // Partial line: put it back for the next read.
        std::ostream(&buf) << line;
        stream.clear();
        break;
      }
      if (!line.empty()) lines.push_back(line);
    }
    stream.clear();
    if (!lines.empty()) {
      std::string reply;
      for (const auto& r : service.answer(lines)) reply += r + '\n';
      writer.push(std::move(reply));
    }
    if (writer.failed() || (eof && buf.size() == 0)) return;
  }
}

}  // namespace

void serve_stdio(const OracleService& service, std::size_t max_batch) {
  asio::io_context io;
  asio::posix::stream_descriptor in(io, ::dup(STDIN_FILENO));
  asio::posix::stream_descriptor out(io, ::dup(STDOUT_FILENO));
  run_session(in, out, service, max_batch);
}

struct UnixServer::Impl {
  const OracleService& service;
  std::filesystem::path path;
  std::size_t max_batch;
  asio::io_context io;
  local::acceptor acceptor;
  std::mutex mutex;
  std::list<local::socket> sockets;
  std::vector<std::thread> threads;
  bool stopped = false;

  Impl(const OracleService& s, std::filesystem::path p, std::size_t b)
      : service(s), path(std::move(p)), max_batch(b), acceptor(io) {
    std::filesystem::remove(path);
    boost::system::error_code ec;
    acceptor.open(local(), ec);
    if (!ec) acceptor.bind(local::endpoint(path.string()), ec);
    if (!ec) acceptor.listen(asio::socket_base::max_listen_connections, ec);
    if (ec) throw IoError("cannot listen on " + path.string() + ": " + ec.message());
  }

  void accept_next() {
    acceptor.async_accept([this](boost::system::error_code ec, local::socket socket) {
      if (ec) return;
      std::lock_guard lock(mutex);
      if (stopped) return;
      auto& s = sockets.emplace_back(std::move(socket));
      threads.emplace_back([this, &s] {
        try {
          asio::posix::stream_descriptor out(s.get_executor(), ::dup(s.native_handle()));
          run_session(s, out, service, max_batch);
        } catch (const std::exception&) {
          // Connection dropped; other sessions carry on.
        }
      });
      accept_next();
    });
  }
};

UnixServer::UnixServer(const OracleService& service, std::filesystem::path socket_path, std::size_t max_batch)
    : impl_(std::make_unique<Impl>(service, std::move(socket_path), max_batch)) {}

UnixServer::~UnixServer() {
  stop();
  for (auto& t : impl_->threads)
    if (t.joinable()) t.join();
  std::filesystem::remove(impl_->path);
}

void UnixServer::run() {
  impl_->accept_next();
  impl_->io.run();
}

void UnixServer::stop() {
  std::lock_guard lock(impl_->mutex);
  if (impl_->stopped) return;
  impl_->stopped = true;
  asio::post(impl_->io, [this] { impl_->acceptor.close(); });
  for (auto& s : impl_->sockets) {
    boost::system::error_code ec;
    s.shutdown(local::socket::shutdown_both, ec);
  }
  impl_->io.stop();
}

// ---------------------------------------------------------------- client

namespace {

class UnixConnection final : public Connection {
 public:
  explicit UnixConnection(const std::string& path) : socket_(io_), writer_(io_) {
    boost::system::error_code ec;
    socket_.connect(local::endpoint(path), ec);
    if (ec) throw OracleError("cannot connect to " + path + ": " + ec.message());
    // Separate descriptor for the writer thread.
    writer_.assign(::dup(socket_.native_handle()));
    read_handshake();
  }

 protected:
  void write_all(const std::string& data) override {
    boost::system::error_code ec;
    asio::write(writer_, asio::buffer(data), ec);
    if (ec) throw OracleError("write failed: " + ec.message());
  }
  bool read_line(std::string& line) override {
    boost::system::error_code ec;
    asio::read_until(socket_, buf_, '\n', ec);
    if (ec && buf_.size() == 0) return false;
    std::istream in(&buf_);
    return static_cast<bool>(std::getline(in, line));
  }

 private:
  asio::io_context io_;
  local::socket socket_;
  asio::posix::stream_descriptor writer_;
  asio::streambuf buf_;
};

namespace bp = boost::process;

class PipeConnection final : public Connection {
 public:
  explicit PipeConnection(const std::string& command) {
    std::signal(SIGPIPE, SIG_IGN);
    try {
      child_ = bp::child(command, bp::std_in < to_, bp::std_out > from_);
    } catch (const std::exception& e) {
      throw OracleError("cannot start '" + command + "': " + e.what());
    }
    read_handshake();
  }
  ~PipeConnection() override {
    to_.close();
    to_.pipe().close();
    std::error_code ec;
    if (child_.valid()) child_.wait(ec);
  }

 protected:
  void write_all(const std::string& data) override {
    to_.write(data.data(), static_cast<std::streamsize>(data.size()));
    to_.flush();
    if (!to_) throw OracleError("write to oracle process failed");
  }
  bool read_line(std::string& line) override { return static_cast<bool>(std::getline(from_, line)); }

 private:
  bp::opstream to_;
  bp::ipstream from_;
  bp::child child_;
};

}  // namespace

std::unique_ptr<Connection> Connection::open(const std::string& endpoint) {
  if (endpoint.rfind("unix:", 0) == 0) return std::make_unique<UnixConnection>(endpoint.substr(5));
  if (endpoint.rfind("stdio:", 0) == 0) return std::make_unique<PipeConnection>(endpoint.substr(6));
  throw ParameterError("oracle endpoint must start with unix: or stdio:, got '" + endpoint + "'");
}

void Connection::read_handshake() {
  std::string line;
  if (!read_line(line)) throw OracleError("oracle closed before the handshake");
  const json h = json::parse(line, nullptr, false);
  if (!h.is_object() || h.value("protocol", "") != kProtocol)
    throw OracleError("unexpected handshake: " + line.substr(0, 200));
  const std::string mode = h.value("mode", "");
  if (mode != "soft" && mode != "hard") throw OracleError("handshake has invalid mode '" + mode + "'");
  mode_ = parse_access_level(mode);
  num_classes_ = h.value("num_classes", 0);
  height_ = h.value("height", 0);
  width_ = h.value("width", 0);
  if (num_classes_ < 1 || height_ < 1 || width_ < 1) throw OracleError("handshake lacks dimensions");
}

Connection::Answers Connection::query(const ImageBatch& batch) {
  const Eigen::Index n = batch.cols();
  if (batch.rows() != 3 * Eigen::Index(height_) * width_)
    throw DimensionError("oracle expects " + std::to_string(height_) + "x" + std::to_string(width_) + " RGB images");
  const std::int64_t first = next_id_;
  next_id_ += n;
  std::exception_ptr write_error;
  std::thread writer([&] {
    try {
      constexpr Eigen::Index kChunk = 64;
      std::string chunk;
      for (Eigen::Index start = 0; start < n; start += kChunk) {
        chunk.clear();
        for (Eigen::Index j = start; j < std::min(n, start + kChunk); ++j)
          chunk += "{\"id\":" + std::to_string(first + j) + ",\"image\":\"" +
                   encode_image(batch.col(j), height_, width_) + "\"}\n";
        write_all(chunk);
      }
    } catch (...) {
      write_error = std::current_exception();
    }
  });

  Answers answers;
  answers.labels.assign(static_cast<std::size_t>(n), -1);
  if (mode_ == AccessLevel::Soft) answers.probs.resize(num_classes_, n);
  // Keep draining after an error so the writer thread can finish.
  std::string error;
  const auto note = [&](const std::string& msg) {
    if (error.empty()) error = msg;
  };
  std::string line;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (!read_line(line)) {
      note("oracle connection closed");
      break;
    }
    if (!error.empty()) continue;
    const json r = json::parse(line, nullptr, false);
    if (!r.is_object() || !r.contains("id") || !r["id"].is_number_integer()) {
      note(r.is_object() && r.contains("error") ? "oracle error: " + r["error"].dump() : "malformed response");
      continue;
    }
    const std::int64_t j = r["id"].get<std::int64_t>() - first;
    if (j < 0 || j >= n || answers.labels[static_cast<std::size_t>(j)] != -1) {
      note("unexpected or duplicate response id " + r["id"].dump());
      continue;
    }
    if (r.contains("error")) {
      note("oracle error for id " + r["id"].dump() + ": " + r["error"].dump());
      continue;
    }
    if (mode_ == AccessLevel::Hard) {
      if (!r.contains("label") || !r["label"].is_number_integer()) {
        note("hard response without a label");
        continue;
      }
      answers.labels[static_cast<std::size_t>(j)] = r["label"].get<int>();
    } else {
      if (!r.contains("probs") || !r["probs"].is_array() || r["probs"].size() != static_cast<std::size_t>(num_classes_)) {
        note("soft response without a probability vector");
        continue;
      }
      for (int c = 0; c < num_classes_; ++c) answers.probs(c, j) = r["probs"][static_cast<std::size_t>(c)].get<float>();
      Eigen::Index best;
      answers.probs.col(j).maxCoeff(&best);
      answers.labels[static_cast<std::size_t>(j)] = static_cast<int>(best);
    }
  }
  writer.join();
  if (write_error && error.empty()) {
    try {
      std::rethrow_exception(write_error);
    } catch (const std::exception& e) {
      error = e.what();
    }
  }
  // After an error the stream position is unknown; the connection is unusable.
  if (!error.empty()) throw OracleError(error);
  return answers;
}

RemoteLabelOracle::RemoteLabelOracle(std::unique_ptr<Connection> connection)
    : connection_(std::move(connection)) {}

std::vector<int> RemoteLabelOracle::labels(const ImageBatch& batch) { return connection_->query(batch).labels; }

RemoteProbabilityOracle::RemoteProbabilityOracle(std::unique_ptr<Connection> connection)
    : connection_(std::move(connection)) {
  if (connection_->mode() != AccessLevel::Soft)
    throw OracleError("probability oracle needs a soft-mode server");
}

Eigen::MatrixXf RemoteProbabilityOracle::probabilities(const ImageBatch& batch) {
  return connection_->query(batch).probs;
}

}  // namespace rp2::wire
