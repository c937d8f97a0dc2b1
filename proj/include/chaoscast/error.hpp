#pragma once

#include <stdexcept>
#include <string>

namespace chaoscast {

// Failure classes map onto distinct CLI exit codes.
enum class ErrorKind { usage, data, numeric, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define CHAOSCAST_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

CHAOSCAST_DEFINE_ERROR(UsageError, usage)
CHAOSCAST_DEFINE_ERROR(IoError, io)

// chaos_gen
CHAOSCAST_DEFINE_ERROR(NonFiniteTrajectory, numeric)
CHAOSCAST_DEFINE_ERROR(DegenerateSeries, data)

// model_core / trainer
CHAOSCAST_DEFINE_ERROR(NonFiniteActivation, numeric)
CHAOSCAST_DEFINE_ERROR(ShapeMismatch, data)
CHAOSCAST_DEFINE_ERROR(CheckpointMismatch, data)

// eval_metrics
CHAOSCAST_DEFINE_ERROR(DegenerateFit, data)

// market_ingest
CHAOSCAST_DEFINE_ERROR(UnreadableFile, io)
CHAOSCAST_DEFINE_ERROR(SchemaMismatch, data)
CHAOSCAST_DEFINE_ERROR(EmptyInput, data)
CHAOSCAST_DEFINE_ERROR(DegenerateCalibration, data)
CHAOSCAST_DEFINE_ERROR(InsufficientData, data)

// backtest
CHAOSCAST_DEFINE_ERROR(InsufficientCalibration, data)
CHAOSCAST_DEFINE_ERROR(MissingCheckpoint, data)

#undef CHAOSCAST_DEFINE_ERROR

inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
    case ErrorKind::io: return 5;
  }
  return 1;
}

}  // namespace chaoscast
